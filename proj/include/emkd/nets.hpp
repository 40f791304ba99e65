#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "emkd/tensor.hpp"

namespace emkd::nets {

/// Declarative description of a small encoder-decoder segmentation network.
/// Each encoder stage is conv3x3/ReLU twice then avg-pool 2; each decoder
/// stage is nearest-upsample 2, optional skip concat, conv3x3/ReLU; a 1x1
/// conv head emits per-class logits.
struct NetworkConfig {
    int depth = 2;            // encoder stages, 2..4
    int base_channels = 4;    // channels of stage 1
    int channel_growth = 2;   // multiplier per stage
    int num_classes = 2;
    bool use_skips = false;
    std::uint64_t seed = 0;

    static NetworkConfig teacher_preset(int num_classes = 2, std::uint64_t seed = 0) {
        return NetworkConfig{3, 16, 2, num_classes, true, seed};
    }
    static NetworkConfig student_preset(int num_classes = 2, std::uint64_t seed = 0) {
        return NetworkConfig{2, 4, 2, num_classes, false, seed};
    }
};

/// Named intermediate feature maps recorded during one forward pass,
/// enc1..encD then dec1..decD.
struct FeatureTaps {
    std::vector<std::pair<std::string, Tensor>> taps;

    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const;
};

struct TapPair {
    std::string student_tap;
    std::string teacher_tap;
};
using TapPairing = std::vector<TapPair>;

enum class TapPolicy {
    first_and_last,  // earliest and latest same-size (student, teacher) pair
    all_same_size,   // greedy in-order 1:1 matching of same-size taps
};

class Network {
public:
    Network() = default;
    explicit Network(const NetworkConfig& cfg);

    const NetworkConfig& config() const { return cfg_; }
    std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

    /// input [N,1,H,W] -> logits [N,num_classes,H,W]. H and W must be
    /// divisible by 2^depth. With track == false the pass records no tape
    /// (frozen-teacher / evaluation mode).
    Tensor forward(const Tensor& input, bool track = true) const;
    std::pair<Tensor, FeatureTaps> forward_with_taps(const Tensor& input, bool track = true) const;

private:
    NetworkConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;

    const Tensor& param(const std::string& name) const;
    std::pair<Tensor, FeatureTaps> run(const Tensor& input, bool track, bool want_taps) const;
};

Network build_network(const NetworkConfig& cfg);

/// Pairs student taps with teacher taps of equal spatial extent. Throws
/// PairingError (listing both spatial-size lists) when no pair exists.
TapPairing match_taps(const FeatureTaps& student, const FeatureTaps& teacher, TapPolicy policy);

std::size_t count_params(const Network& net);

/// FNV-1a over the raw bytes of every parameter, in parameter order.
std::uint64_t params_checksum(const Network& net);

// Model container file: magic "EMKM", u32 version, u32 record count, then
// (u16 name length, name, tensor record) per parameter. A "__config" meta
// record carries the NetworkConfig so a load reconstructs the architecture.
void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

}  // namespace emkd::nets
