#pragma once

#include "minivlm/backbone.hpp"

#include <vector>

namespace minivlm {

// Stack of decoder blocks with the LLM backbone's width/head/FFN shape, run
// over [vision ; text] before the LLM so text tokens absorb visual content.
struct PrefusionStack {
    std::vector<BlockWeights> blocks;
    int n_heads = 1;
    Nonlin nl = Nonlin::Silu;

    static PrefusionStack init(const ModelConfig& cfg, Rng& rng);
    std::vector<Parameter*> parameters();
};

// Concatenates [h_v_all ; h_q], applies the stack under a causal mask (text
// follows vision, so every text token sees every vision token) and returns
// the last l_q rows. An empty stack is an exact passthrough of h_q.
Var prefuse(Tape& tape, PrefusionStack& stack, Var h_v_all, Var h_q);

}  // namespace minivlm
