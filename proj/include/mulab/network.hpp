#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mulab/rng.hpp"
#include "mulab/sha256.hpp"
#include "mulab/tensor.hpp"

namespace mulab {

struct AffineLayer {
    Tensor w;  // [in x out]
    Tensor b;  // [out]

    std::size_t in_width() const { return w.shape[0]; }
    std::size_t out_width() const { return w.shape[1]; }
    std::size_t param_count() const { return w.numel() + b.numel(); }
};

// Tanh MLP with an explicit encoder/head boundary.  Layer indices run over
// blocks 0..L-1 followed by the head affine at index L; the trailing
// head_depth layers count as the head, everything earlier is the encoder.
struct Network {
    std::vector<AffineLayer> blocks;  // affine + tanh, L >= 2
    AffineLayer head;                 // final affine to C logits
    std::size_t head_depth = 1;
    std::uint64_t init_seed = 0;

    std::size_t depth() const { return blocks.size(); }          // L
    std::size_t total_layers() const { return blocks.size() + 1; }
    std::size_t input_dim() const { return blocks.front().in_width(); }
    std::size_t num_classes() const { return head.out_width(); }

    // Index (into features) of the encoder output: the tap feeding the head
    // region.  With head_depth 1 this is the last block's output.
    std::size_t encoder_output_index() const { return total_layers() - head_depth - 1; }

    std::size_t param_count() const {
        std::size_t n = head.param_count();
        for (const auto& blk : blocks) n += blk.param_count();
        return n;
    }

    void validate() const {
        if (blocks.size() < 2) {
            throw std::invalid_argument("Network: needs at least 2 encoder blocks");
        }
        for (std::size_t i = 0; i + 1 < blocks.size(); ++i) {
            if (blocks[i].out_width() != blocks[i + 1].in_width()) {
                throw std::invalid_argument("Network: width mismatch between blocks " +
                                            std::to_string(i) + " and " + std::to_string(i + 1));
            }
        }
        if (blocks.back().out_width() != head.in_width()) {
            throw std::invalid_argument("Network: head input width mismatch");
        }
        if (head_depth < 1 || head_depth > blocks.size()) {
            throw std::invalid_argument("Network: head_depth out of range");
        }
    }
};

namespace detail {

// Seeded scaled-uniform init: W ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), b = 0.
// The stream depends only on (seed, layer index) so partial reinitialization
// with the same seed agrees bit-for-bit with a full build.
inline AffineLayer init_affine(std::size_t in, std::size_t out, std::uint64_t seed,
                               std::size_t layer_index) {
    Rng rng(derive_seed(seed, "layer", layer_index));
    AffineLayer l;
    l.w = Tensor({in, out});
    l.b = Tensor({out});
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& x : l.w.data) x = rng.uniform(-scale, scale);
    return l;
}

}  // namespace detail

inline Network build_mlp(std::size_t input_dim, const std::vector<std::size_t>& widths,
                         std::size_t num_classes, std::uint64_t seed, std::size_t head_depth = 1) {
    if (widths.empty()) throw std::invalid_argument("build_mlp: widths must be nonempty");
    if (widths.size() < 2) {
        throw std::invalid_argument("build_mlp: needs at least 2 blocks for feature taps");
    }
    for (std::size_t w : widths) {
        if (w == 0) throw std::invalid_argument("build_mlp: widths must be positive");
    }
    if (input_dim == 0 || num_classes < 2) {
        throw std::invalid_argument("build_mlp: bad input_dim or num_classes");
    }
    Network net;
    net.init_seed = seed;
    net.head_depth = head_depth;
    std::size_t in = input_dim;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        net.blocks.push_back(detail::init_affine(in, widths[i], seed, i));
        in = widths[i];
    }
    net.head = detail::init_affine(in, num_classes, seed, widths.size());
    net.validate();
    return net;
}

// Per-block post-tanh features plus head logits for one batch.
struct TapBundle {
    Tensor logits;                 // [B x C]
    std::vector<Tensor> features;  // length L, features[l] = Z_l
};

inline TapBundle forward_with_taps(const Network& net, const Tensor& batch) {
    if (batch.shape.size() != 2 || batch.shape[1] != net.input_dim()) {
        throw std::invalid_argument("forward_with_taps: batch width " +
                                    std::to_string(batch.shape.size() == 2 ? batch.shape[1] : 0) +
                                    " does not match input_dim " +
                                    std::to_string(net.input_dim()));
    }
    const std::size_t b = batch.shape[0];
    TapBundle out;
    out.features.reserve(net.depth());
    const Tensor* cur = &batch;
    Tensor pre;
    for (const auto& blk : net.blocks) {
        pre = Tensor({b, blk.out_width()});
        Tensor post({b, blk.out_width()});
        matmul_kernel(cur->data.data(), blk.w.data.data(), pre.data.data(), b, blk.in_width(),
                      blk.out_width());
        add_bias_kernel(pre.data.data(), blk.b.data.data(), pre.data.data(), b, blk.out_width());
        tanh_kernel(pre.data.data(), post.data.data(), pre.numel());
        out.features.push_back(std::move(post));
        cur = &out.features.back();
    }
    out.logits = Tensor({b, net.num_classes()});
    matmul_kernel(cur->data.data(), net.head.w.data.data(), out.logits.data.data(), b,
                  net.head.in_width(), net.head.out_width());
    add_bias_kernel(out.logits.data.data(), net.head.b.data.data(), out.logits.data.data(), b,
                    net.head.out_width());
    return out;
}

inline Tensor forward_logits(const Network& net, const Tensor& batch) {
    return forward_with_taps(net, batch).logits;
}

// Masked copy: forget-class columns set to -inf so softmax assigns them
// probability exactly zero.
inline Tensor mask_forget_logits(const Tensor& logits, const std::vector<int>& forget_classes) {
    if (logits.shape.size() != 2) {
        throw std::invalid_argument("mask_forget_logits: logits must be [B x C]");
    }
    const std::size_t c = logits.shape[1];
    std::vector<bool> masked(c, false);
    for (int cls : forget_classes) {
        if (cls < 0 || static_cast<std::size_t>(cls) >= c) {
            throw std::invalid_argument("mask_forget_logits: class out of range");
        }
        masked[static_cast<std::size_t>(cls)] = true;
    }
    std::size_t masked_count = 0;
    for (bool m : masked) masked_count += m ? 1 : 0;
    if (masked_count == c) {
        throw std::invalid_argument("mask_forget_logits: masking every class is undefined");
    }
    Tensor out = logits;
    for (std::size_t r = 0; r < out.shape[0]; ++r) {
        for (std::size_t j = 0; j < c; ++j) {
            if (masked[j]) out.at(r, j) = -std::numeric_limits<double>::infinity();
        }
    }
    return out;
}

// Reinitialize the last k layers (head counts as one layer) with the seeded
// scheme; everything earlier is copied bit-for-bit.
inline Network reinit_layers(const Network& net, std::size_t k_from_end, std::uint64_t seed) {
    const std::size_t total = net.total_layers();
    if (k_from_end < 1 || k_from_end > total) {
        throw std::invalid_argument("reinit_layers: k must be in [1, " + std::to_string(total) +
                                    "]");
    }
    Network out = net;
    const std::size_t first = total - k_from_end;
    for (std::size_t i = first; i < total; ++i) {
        if (i < net.depth()) {
            out.blocks[i] =
                detail::init_affine(net.blocks[i].in_width(), net.blocks[i].out_width(), seed, i);
        } else {
            out.head = detail::init_affine(net.head.in_width(), net.head.out_width(), seed, i);
        }
    }
    if (k_from_end == total) out.init_seed = seed;
    return out;
}

// ---------------------------------------------------------------------------
// Parameter digests (used by freezing assertions and tests)
// ---------------------------------------------------------------------------

// Flat parameter vector in layer order, weights before bias.
inline std::vector<double> parameter_vector(const Network& net) {
    std::vector<double> out;
    out.reserve(net.param_count());
    auto push = [&out](const AffineLayer& l) {
        out.insert(out.end(), l.w.data.begin(), l.w.data.end());
        out.insert(out.end(), l.b.data.begin(), l.b.data.end());
    };
    for (const auto& blk : net.blocks) push(blk);
    push(net.head);
    return out;
}

// SHA-256 over the raw bytes of layers [from, to).
inline std::string digest_of_layers(const Network& net, std::size_t from, std::size_t to) {
    Sha256 h;
    auto feed = [&h](const AffineLayer& l) {
        h.update(l.w.data.data(), l.w.data.size() * sizeof(double));
        h.update(l.b.data.data(), l.b.data.size() * sizeof(double));
    };
    for (std::size_t i = from; i < to && i < net.depth(); ++i) feed(net.blocks[i]);
    if (to >= net.total_layers()) feed(net.head);
    return to_hex(h.finish());
}

inline std::string encoder_digest(const Network& net) {
    return digest_of_layers(net, 0, net.total_layers() - net.head_depth);
}

inline std::string parameter_digest(const Network& net) {
    return digest_of_layers(net, 0, net.total_layers());
}

}  // namespace mulab
