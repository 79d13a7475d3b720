#include "minivlm/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace minivlm {

static_assert(std::endian::native == std::endian::little,
              "container payload is little-endian; big-endian hosts need byte swaps");

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};

void put_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint64_t get_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw std::runtime_error("tensor container: truncated header");
    return v;
}

}  // namespace

NamedTensor NamedTensor::from_mat(std::string name, const Mat& m) {
    NamedTensor t;
    t.name = std::move(name);
    t.dims = {static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())};
    t.data.assign(m.data(), m.data() + m.size());
    return t;
}

Mat NamedTensor::to_mat() const {
    if (dims.size() != 2) {
        throw std::runtime_error("tensor '" + name + "' has rank " + std::to_string(dims.size()) +
                                 ", expected 2");
    }
    Mat m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
    std::memcpy(m.data(), data.data(), data.size() * sizeof(double));
    return m;
}

void write_archive(const std::string& path, const std::vector<NamedTensor>& tensors,
                   const nlohmann::ordered_json& metadata) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
    nlohmann::ordered_json names = nlohmann::ordered_json::array();
    for (const NamedTensor& t : tensors) {
        uint64_t count = 1;
        for (uint64_t d : t.dims) count *= d;
        if (count != t.data.size()) {
            throw std::runtime_error("tensor '" + t.name + "': dims product " +
                                     std::to_string(count) + " != data length " +
                                     std::to_string(t.data.size()));
        }
        os.write(kMagic, sizeof(kMagic));
        put_u64(os, t.dims.size());
        for (uint64_t d : t.dims) put_u64(os, d);
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        names.push_back({{"name", t.name}, {"dims", t.dims}});
    }
    if (!os) throw std::runtime_error("write failed for '" + path + "'");
    os.close();

    nlohmann::ordered_json side;
    side["tensors"] = names;
    if (!metadata.is_null()) side["metadata"] = metadata;
    std::ofstream js(path + ".json", std::ios::trunc);
    if (!js) throw std::runtime_error("cannot open '" + path + ".json' for writing");
    js << side.dump(2) << "\n";
}

Archive read_archive(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open '" + path + "'");
    std::ifstream js(path + ".json");
    if (!js) throw std::runtime_error("missing sidecar '" + path + ".json'");
    nlohmann::ordered_json side = nlohmann::ordered_json::parse(js);

    Archive a;
    if (side.contains("metadata")) a.metadata = side["metadata"];
    for (const auto& entry : side["tensors"]) {
        char magic[4];
        is.read(magic, sizeof(magic));
        if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
            throw std::runtime_error("tensor container: bad magic in '" + path + "'");
        }
        NamedTensor t;
        t.name = entry["name"].get<std::string>();
        const uint64_t rank = get_u64(is);
        uint64_t count = 1;
        for (uint64_t i = 0; i < rank; ++i) {
            t.dims.push_back(get_u64(is));
            count *= t.dims.back();
        }
        t.data.resize(count);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(count * sizeof(double)));
        if (!is) throw std::runtime_error("tensor container: truncated payload in '" + path + "'");
        a.tensors.push_back(std::move(t));
    }
    return a;
}

const NamedTensor* Archive::find(const std::string& name) const {
    for (const NamedTensor& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

}  // namespace minivlm
