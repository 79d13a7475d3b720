#pragma once

#include "minivlm/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace minivlm {

// Flat binary tensor container. Each record is:
//   magic "TNSR" | rank u64 LE | dims u64 LE each | payload f64 LE, row-major
// An archive file is records back to back; a JSON sidecar ("<path>.json")
// carries the record names, shapes and caller metadata. Writing the same
// tensors twice produces byte-identical files.
struct NamedTensor {
    std::string name;
    std::vector<uint64_t> dims;
    std::vector<double> data;  // row-major

    static NamedTensor from_mat(std::string name, const Mat& m);
    Mat to_mat() const;  // requires rank 2
};

void write_archive(const std::string& path, const std::vector<NamedTensor>& tensors,
                   const nlohmann::ordered_json& metadata = {});

struct Archive {
    std::vector<NamedTensor> tensors;
    nlohmann::ordered_json metadata;

    const NamedTensor* find(const std::string& name) const;
};

Archive read_archive(const std::string& path);

}  // namespace minivlm
