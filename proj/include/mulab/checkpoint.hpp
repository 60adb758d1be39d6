#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mulab/network.hpp"
#include "mulab/sha256.hpp"

namespace mulab {

// Checkpoint problems are reported with a kind so callers (and tests) can
// tell version, truncation, digest and structural failures apart.
struct CheckpointError : std::runtime_error {
    enum class Kind { version, truncated, digest, structure, io };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg)
        : std::runtime_error("checkpoint: " + msg), kind(k) {}
};

namespace detail {

inline constexpr const char* kCkptMagic = "mulab-ckpt v1";

// Payload doubles are stored little-endian regardless of host order.
inline void to_little_endian(std::vector<double>& v) {
    if constexpr (std::endian::native == std::endian::big) {
        for (double& x : v) {
            std::uint64_t bits;
            std::memcpy(&bits, &x, 8);
            bits = __builtin_bswap64(bits);
            std::memcpy(&x, &bits, 8);
        }
    }
}

}  // namespace detail

// Plain-text header (format version, shapes, seed, payload digest) followed
// by the raw little-endian f64 parameters in layer order.
inline void save_checkpoint(const Network& net, const std::string& path) {
    net.validate();
    std::vector<double> payload = parameter_vector(net);
    detail::to_little_endian(payload);
    const std::string digest =
        sha256_hex(payload.data(), payload.size() * sizeof(double));

    std::ostringstream header;
    header << detail::kCkptMagic << "\n";
    header << "input_dim " << net.input_dim() << "\n";
    header << "widths";
    for (const auto& blk : net.blocks) header << " " << blk.out_width();
    header << "\n";
    header << "num_classes " << net.num_classes() << "\n";
    header << "head_depth " << net.head_depth << "\n";
    header << "init_seed " << net.init_seed << "\n";
    header << "payload_doubles " << payload.size() << "\n";
    header << "payload_sha256 " << digest << "\n";
    header << "---\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "'");
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed on '" + path + "'");
}

inline Network load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "'");

    auto read_line = [&in, &path]() {
        std::string line;
        if (!std::getline(in, line)) {
            throw CheckpointError(CheckpointError::Kind::truncated,
                                  "unexpected end of header in '" + path + "'");
        }
        return line;
    };

    const std::string magic = read_line();
    if (magic != detail::kCkptMagic) {
        throw CheckpointError(CheckpointError::Kind::version,
                              "format version mismatch: got '" + magic + "'");
    }

    std::size_t input_dim = 0, num_classes = 0, head_depth = 0, payload_doubles = 0;
    std::uint64_t init_seed = 0;
    std::vector<std::size_t> widths;
    std::string digest;
    bool saw_separator = false;
    for (std::string line = read_line(); !saw_separator; line = read_line()) {
        if (line == "---") {
            saw_separator = true;
            break;
        }
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        bool ok = true;
        if (key == "input_dim") ok = static_cast<bool>(ss >> input_dim);
        else if (key == "widths") {
            std::size_t w;
            while (ss >> w) widths.push_back(w);
            ok = !widths.empty();
        } else if (key == "num_classes") ok = static_cast<bool>(ss >> num_classes);
        else if (key == "head_depth") ok = static_cast<bool>(ss >> head_depth);
        else if (key == "init_seed") ok = static_cast<bool>(ss >> init_seed);
        else if (key == "payload_doubles") ok = static_cast<bool>(ss >> payload_doubles);
        else if (key == "payload_sha256") ok = static_cast<bool>(ss >> digest);
        else {
            throw CheckpointError(CheckpointError::Kind::structure,
                                  "unknown header key '" + key + "'");
        }
        if (!ok) {
            throw CheckpointError(CheckpointError::Kind::structure,
                                  "malformed header line '" + line + "'");
        }
    }
    if (input_dim == 0 || num_classes == 0 || widths.size() < 2 || head_depth == 0 ||
        digest.size() != 64) {
        throw CheckpointError(CheckpointError::Kind::structure, "incomplete header");
    }

    // Structural consistency: declared payload length must match the shapes.
    std::size_t expected = 0;
    std::size_t in_w = input_dim;
    for (std::size_t w : widths) {
        expected += in_w * w + w;
        in_w = w;
    }
    expected += in_w * num_classes + num_classes;
    if (expected != payload_doubles) {
        throw CheckpointError(CheckpointError::Kind::structure,
                              "declared payload_doubles " + std::to_string(payload_doubles) +
                                  " does not match shapes (" + std::to_string(expected) + ")");
    }

    std::vector<double> payload(payload_doubles);
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != payload.size() * sizeof(double)) {
        throw CheckpointError(CheckpointError::Kind::truncated,
                              "payload shorter than declared in '" + path + "'");
    }
    const std::string actual = sha256_hex(payload.data(), payload.size() * sizeof(double));
    if (actual != digest) {
        throw CheckpointError(CheckpointError::Kind::digest,
                              "payload digest mismatch in '" + path + "'");
    }
    detail::to_little_endian(payload);  // symmetric swap back on big-endian hosts

    Network net;
    net.init_seed = init_seed;
    net.head_depth = head_depth;
    std::size_t off = 0;
    auto take = [&payload, &off](std::size_t in_width, std::size_t out_width) {
        AffineLayer l;
        l.w = Tensor({in_width, out_width});
        std::copy(payload.begin() + static_cast<std::ptrdiff_t>(off),
                  payload.begin() + static_cast<std::ptrdiff_t>(off + in_width * out_width),
                  l.w.data.begin());
        off += in_width * out_width;
        l.b = Tensor({out_width});
        std::copy(payload.begin() + static_cast<std::ptrdiff_t>(off),
                  payload.begin() + static_cast<std::ptrdiff_t>(off + out_width),
                  l.b.data.begin());
        off += out_width;
        return l;
    };
    in_w = input_dim;
    for (std::size_t w : widths) {
        net.blocks.push_back(take(in_w, w));
        in_w = w;
    }
    net.head = take(in_w, num_classes);
    net.validate();
    return net;
}

// Save-then-load in one call; handy for tests and migrations.
inline Network checkpoint_roundtrip(const Network& net, const std::string& path) {
    save_checkpoint(net, path);
    return load_checkpoint(path);
}

}  // namespace mulab
