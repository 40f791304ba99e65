#include "emkd/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "emkd/error.hpp"
#include "emkd/serialize.hpp"

namespace emkd::nets {

namespace {

void check_config(const NetworkConfig& cfg) {
    if (cfg.depth < 2 || cfg.depth > 4) {
        throw ConfigError("network depth must be 2..4");
    }
    if (cfg.base_channels < 1 || cfg.channel_growth < 1) {
        throw ConfigError("network channels must be >= 1");
    }
    if (cfg.num_classes < 2) {
        throw ConfigError("network num_classes must be >= 2");
    }
}

std::vector<int> stage_channels(const NetworkConfig& cfg) {
    std::vector<int> ch(static_cast<std::size_t>(cfg.depth));
    int c = cfg.base_channels;
    for (int i = 0; i < cfg.depth; ++i) {
        ch[static_cast<std::size_t>(i)] = c;
        c *= cfg.channel_growth;
    }
    return ch;
}

int decoder_out_channels(const std::vector<int>& ch, int depth, int stage) {
    return ch[static_cast<std::size_t>(std::max(depth - 1 - stage, 0))];
}

}  // namespace

const Tensor& FeatureTaps::at(const std::string& name) const {
    for (const auto& [tap_name, tensor] : taps) {
        if (tap_name == name) {
            return tensor;
        }
    }
    throw ValueError("unknown feature tap: " + name);
}

bool FeatureTaps::contains(const std::string& name) const {
    for (const auto& [tap_name, tensor] : taps) {
        if (tap_name == name) {
            return true;
        }
    }
    return false;
}

Network::Network(const NetworkConfig& cfg) : cfg_(cfg) {
    check_config(cfg);
    Rng rng(Rng::derive(cfg.seed, 0x11172u));
    const std::vector<int> ch = stage_channels(cfg);

    auto add_conv = [&](const std::string& name, int cin, int cout, int k) {
        // Variance-preserving uniform bound. The recipe has no normalization
        // layers, so a smaller gain shrinks activations ~6x per conv and the
        // normalized-map losses become ill-conditioned at the deep taps.
        const double bound = std::sqrt(6.0 / (static_cast<double>(cin) * k * k));
        params_.emplace_back(name + ".weight", rand_uniform({cout, cin, k, k}, -bound, bound, rng, true));
        // Zero biases keep pre-activations centered; at very small widths a
        // uniform bias draw can silence every ReLU channel of a stage for good.
        params_.emplace_back(name + ".bias", Tensor::zeros({cout}, true));
    };

    for (int i = 1; i <= cfg.depth; ++i) {
        const int cin = i == 1 ? 1 : ch[static_cast<std::size_t>(i - 2)];
        const int cout = ch[static_cast<std::size_t>(i - 1)];
        add_conv("enc" + std::to_string(i) + ".conv1", cin, cout, 3);
        add_conv("enc" + std::to_string(i) + ".conv2", cout, cout, 3);
    }
    int carried = ch[static_cast<std::size_t>(cfg.depth - 1)];
    for (int j = 1; j <= cfg.depth; ++j) {
        int cin = carried;
        if (cfg.use_skips) {
            cin += ch[static_cast<std::size_t>(cfg.depth - j)];
        }
        const int cout = decoder_out_channels(ch, cfg.depth, j);
        add_conv("dec" + std::to_string(j) + ".conv", cin, cout, 3);
        carried = cout;
    }
    add_conv("head", carried, cfg.num_classes, 1);
}

const Tensor& Network::param(const std::string& name) const {
    for (const auto& [param_name, tensor] : params_) {
        if (param_name == name) {
            return tensor;
        }
    }
    throw ValueError("unknown parameter: " + name);
}

std::pair<Tensor, FeatureTaps> Network::run(const Tensor& input, bool track, bool want_taps) const {
    if (input.rank() != 4 || input.extent(1) != 1) {
        throw ShapeError("network input must be [N,1,H,W]");
    }
    const int div = 1 << cfg_.depth;
    if (input.extent(2) % div != 0 || input.extent(3) % div != 0) {
        throw ShapeError("network input extents must be divisible by 2^depth = " + std::to_string(div));
    }

    auto p = [&](const std::string& name) {
        const Tensor& t = param(name);
        return track ? t : t.detach();
    };

    FeatureTaps taps;
    std::vector<Tensor> skips;  // pre-pool encoder activations, stage 1..depth
    Tensor x = input;
    for (int i = 1; i <= cfg_.depth; ++i) {
        const std::string s = "enc" + std::to_string(i);
        x = relu(conv2d(x, p(s + ".conv1.weight"), p(s + ".conv1.bias"), 1, 1));
        x = relu(conv2d(x, p(s + ".conv2.weight"), p(s + ".conv2.bias"), 1, 1));
        skips.push_back(x);
        x = avg_pool2d(x, 2);
        if (want_taps) {
            taps.taps.emplace_back(s, x);
        }
    }
    for (int j = 1; j <= cfg_.depth; ++j) {
        const std::string s = "dec" + std::to_string(j);
        x = upsample_nearest(x, 2);
        if (cfg_.use_skips) {
            x = concat_channels(x, skips[static_cast<std::size_t>(cfg_.depth - j)]);
        }
        x = relu(conv2d(x, p(s + ".conv.weight"), p(s + ".conv.bias"), 1, 1));
        if (want_taps) {
            taps.taps.emplace_back(s, x);
        }
    }
    Tensor logits = conv2d(x, p("head.weight"), p("head.bias"), 1, 0);
    return {logits, taps};
}

Tensor Network::forward(const Tensor& input, bool track) const { return run(input, track, false).first; }

std::pair<Tensor, FeatureTaps> Network::forward_with_taps(const Tensor& input, bool track) const {
    return run(input, track, true);
}

Network build_network(const NetworkConfig& cfg) { return Network(cfg); }

namespace {

std::pair<int, int> spatial(const Tensor& t) { return {t.extent(t.rank() - 2), t.extent(t.rank() - 1)}; }

std::string size_list(const FeatureTaps& taps) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < taps.taps.size(); ++i) {
        const auto [h, w] = spatial(taps.taps[i].second);
        out << (i ? " " : "") << taps.taps[i].first << ":" << h << "x" << w;
    }
    out << "]";
    return out.str();
}

}  // namespace

TapPairing match_taps(const FeatureTaps& student, const FeatureTaps& teacher, TapPolicy policy) {
    if (student.taps.empty() || teacher.taps.empty()) {
        throw PairingError("match_taps: empty tap list");
    }

    TapPairing pairing;
    if (policy == TapPolicy::first_and_last) {
        int first_s = -1, first_t = -1, last_s = -1, last_t = -1;
        for (std::size_t si = 0; si < student.taps.size() && first_s < 0; ++si) {
            for (std::size_t ti = 0; ti < teacher.taps.size(); ++ti) {
                if (spatial(student.taps[si].second) == spatial(teacher.taps[ti].second)) {
                    first_s = static_cast<int>(si);
                    first_t = static_cast<int>(ti);
                    break;
                }
            }
        }
        for (std::size_t si = student.taps.size(); si-- > 0 && last_s < 0;) {
            for (std::size_t ti = teacher.taps.size(); ti-- > 0;) {
                if (spatial(student.taps[si].second) == spatial(teacher.taps[ti].second)) {
                    last_s = static_cast<int>(si);
                    last_t = static_cast<int>(ti);
                    break;
                }
            }
        }
        if (first_s >= 0) {
            pairing.push_back({student.taps[static_cast<std::size_t>(first_s)].first,
                               teacher.taps[static_cast<std::size_t>(first_t)].first});
        }
        if (last_s >= 0 && (last_s != first_s || last_t != first_t)) {
            pairing.push_back({student.taps[static_cast<std::size_t>(last_s)].first,
                               teacher.taps[static_cast<std::size_t>(last_t)].first});
        }
    } else {
        // In-order 1:1 matching keeps pairs at corresponding depths, so a
        // network paired with itself maps every tap onto itself.
        std::size_t cursor = 0;
        for (const auto& [sname, stensor] : student.taps) {
            for (std::size_t ti = cursor; ti < teacher.taps.size(); ++ti) {
                if (spatial(stensor) == spatial(teacher.taps[ti].second)) {
                    pairing.push_back({sname, teacher.taps[ti].first});
                    cursor = ti + 1;
                    break;
                }
            }
        }
    }

    if (pairing.empty()) {
        throw PairingError("match_taps: no spatially compatible pair between student " + size_list(student) +
                           " and teacher " + size_list(teacher));
    }
    return pairing;
}

std::size_t count_params(const Network& net) {
    std::size_t n = 0;
    for (const auto& [name, t] : net.parameters()) {
        n += t.numel();
    }
    return n;
}

std::uint64_t params_checksum(const Network& net) {
    std::uint64_t hash = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : net.parameters()) {
        for (double v : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            for (int b = 0; b < 8; ++b) {
                hash ^= (bits >> (8 * b)) & 0xff;
                hash *= 0x100000001b3ull;
            }
        }
    }
    return hash;
}

// ---------------------------------------------------------------------------
// Model container

namespace {

constexpr char kModelMagic[4] = {'E', 'M', 'K', 'M'};
constexpr std::uint32_t kModelVersion = 1;
constexpr const char* kConfigRecord = "__config";

Tensor config_record(const NetworkConfig& cfg) {
    return Tensor::from_data({7}, {static_cast<double>(cfg.depth), static_cast<double>(cfg.base_channels),
                                   static_cast<double>(cfg.channel_growth), static_cast<double>(cfg.num_classes),
                                   cfg.use_skips ? 1.0 : 0.0, static_cast<double>(cfg.seed & 0xffffffffull),
                                   static_cast<double>(cfg.seed >> 32)},
                             false);
}

NetworkConfig config_from_record(const Tensor& t) {
    if (t.numel() != 7) {
        throw FormatError("model __config record has wrong size");
    }
    const auto& v = t.data();
    NetworkConfig cfg;
    cfg.depth = static_cast<int>(v[0]);
    cfg.base_channels = static_cast<int>(v[1]);
    cfg.channel_growth = static_cast<int>(v[2]);
    cfg.num_classes = static_cast<int>(v[3]);
    cfg.use_skips = v[4] != 0.0;
    cfg.seed = static_cast<std::uint64_t>(v[5]) | (static_cast<std::uint64_t>(v[6]) << 32);
    return cfg;
}

}  // namespace

void save_network(const Network& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open model file for writing: " + path);
    }
    out.write(kModelMagic, 4);
    io::write_u32(out, kModelVersion);
    io::write_u32(out, static_cast<std::uint32_t>(net.parameters().size() + 1));

    auto write_record = [&out](const std::string& name, const Tensor& t) {
        io::write_u16(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_tensor_record(out, t);
    };
    write_record(kConfigRecord, config_record(net.config()));
    for (const auto& [name, t] : net.parameters()) {
        write_record(name, t);
    }
}

Network load_network(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open model file for reading: " + path);
    }
    char magic[4];
    io::read_exact(in, magic, 4, 0, "model magic");
    if (std::memcmp(magic, kModelMagic, 4) != 0) {
        throw FormatError("bad model magic at byte offset 0 in " + path);
    }
    const std::uint32_t version = io::read_u32(in, 4, "model version");
    if (version != kModelVersion) {
        throw FormatError("unsupported model version at byte offset 4 in " + path);
    }
    const std::uint32_t count = io::read_u32(in, 8, "model record count");

    std::map<std::string, Tensor> records;
    for (std::uint32_t r = 0; r < count; ++r) {
        const std::uint64_t name_off = static_cast<std::uint64_t>(in.tellg());
        const std::uint16_t name_len = io::read_u16(in, name_off, "record name length");
        std::string name(name_len, '\0');
        io::read_exact(in, name.data(), name_len, name_off + 2, "record name");
        const std::uint64_t rec_off = static_cast<std::uint64_t>(in.tellg());
        records.emplace(name, io::read_tensor_record(in, rec_off));
    }

    const auto cfg_it = records.find(kConfigRecord);
    if (cfg_it == records.end()) {
        throw FormatError("model file has no __config record: " + path);
    }
    Network net(config_from_record(cfg_it->second));
    for (auto& [name, t] : net.parameters()) {
        const auto it = records.find(name);
        if (it == records.end()) {
            throw FormatError("model file is missing parameter " + name + ": " + path);
        }
        if (it->second.shape() != t.shape()) {
            throw FormatError("model parameter " + name + " has wrong shape: " + path);
        }
        t.data() = it->second.data();
    }
    return net;
}

}  // namespace emkd::nets
