#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>

#include "json.hpp"

#include "ssmcond/dynamics.hpp"
#include "ssmcond/encoders.hpp"
#include "ssmcond/frontend.hpp"
#include "ssmcond/pitch.hpp"
#include "ssmcond/tensor_io.hpp"

namespace ssmcond {

struct ModelConfig {
    std::size_t vocab = 64;
    std::size_t d_token = 64; // token embedding width d
    std::size_t d_h = 64;
    std::size_t d_s = 32;
    std::size_t d_ssm = 96;
    std::size_t kernel = 5;
    double tau = 1.0;
    std::size_t text_layers = 6;
    std::size_t expressive_layers = 2;
    std::size_t temporal_layers = 2;
    std::size_t mel_bins = kMelBins;
    std::size_t aligner_hidden = 256;
    std::size_t aligner_heads = 4;
    std::size_t aligner_layers = 2;
    bool temporal_gated_fusion = false;
    double state_bound = kDefaultStateBound;
    std::uint64_t seed = 0;

    void validate() const {
        auto positive = [](std::size_t v, const char *name) {
            if (v == 0)
                throw Error(detail::concat("config: ", name, " must be positive"));
        };
        positive(vocab, "vocab");
        positive(d_token, "d_token");
        positive(d_h, "d_h");
        positive(d_s, "d_s");
        positive(d_ssm, "d_ssm");
        positive(kernel, "kernel");
        positive(mel_bins, "mel_bins");
        if (kernel % 2 == 0)
            throw Error(detail::concat("config: kernel must be odd, got ", kernel));
        if (!(tau > 0.0))
            throw Error(detail::concat("config: tau must be positive, got ", tau));
        if (aligner_heads == 0 || aligner_hidden % aligner_heads != 0)
            throw Error("config: aligner_hidden must be a multiple of aligner_heads");
    }
};

inline void to_json(nlohmann::json &j, const ModelConfig &c) {
    j = nlohmann::json{{"vocab", c.vocab},
                       {"d_token", c.d_token},
                       {"d_h", c.d_h},
                       {"d_s", c.d_s},
                       {"d_ssm", c.d_ssm},
                       {"kernel", c.kernel},
                       {"tau", c.tau},
                       {"text_layers", c.text_layers},
                       {"expressive_layers", c.expressive_layers},
                       {"temporal_layers", c.temporal_layers},
                       {"mel_bins", c.mel_bins},
                       {"aligner_hidden", c.aligner_hidden},
                       {"aligner_heads", c.aligner_heads},
                       {"aligner_layers", c.aligner_layers},
                       {"temporal_gated_fusion", c.temporal_gated_fusion},
                       {"state_bound", c.state_bound},
                       {"seed", c.seed}};
}

// Missing keys keep their defaults.
inline void from_json(const nlohmann::json &j, ModelConfig &c) {
    auto opt = [&j](const char *key, auto &field) {
        if (j.contains(key))
            j.at(key).get_to(field);
    };
    opt("vocab", c.vocab);
    opt("d_token", c.d_token);
    opt("d_h", c.d_h);
    opt("d_s", c.d_s);
    opt("d_ssm", c.d_ssm);
    opt("kernel", c.kernel);
    opt("tau", c.tau);
    opt("text_layers", c.text_layers);
    opt("expressive_layers", c.expressive_layers);
    opt("temporal_layers", c.temporal_layers);
    opt("mel_bins", c.mel_bins);
    opt("aligner_hidden", c.aligner_hidden);
    opt("aligner_heads", c.aligner_heads);
    opt("aligner_layers", c.aligner_layers);
    opt("temporal_gated_fusion", c.temporal_gated_fusion);
    opt("state_bound", c.state_bound);
    opt("seed", c.seed);
}

// SSMCOND_SEED, when set, replaces the configured seed.
inline std::uint64_t seed_from_env(std::uint64_t fallback) {
    if (const char *s = std::getenv("SSMCOND_SEED"); s != nullptr && *s != '\0') {
        char *end = nullptr;
        const unsigned long long v = std::strtoull(s, &end, 10);
        if (end != nullptr && *end == '\0')
            return v;
        throw Error(detail::concat("SSMCOND_SEED is not an unsigned integer: '", s, "'"));
    }
    return fallback;
}

// ─── Inference parameters ────────────────────────────────────────────────────

// Everything the deployed conditioning path needs. The training-time aligner
// and the toy decoder are deliberately not part of this struct.
struct ConditioningModel {
    ModelConfig config;
    Tensor embedding; // vocab × d_token
    StyleParams style;
    TextEncoderParams text;
    ExpressiveParams expressive;
    TemporalParams temporal;
    PitchParams pitch;
    DynamicsParams dynamics;

    template <class F> void for_each(F &&f) {
        auto scoped = [&f](const std::string &prefix) {
            return [&f, prefix](const std::string &n, Tensor &t) { f(prefix + n, t); };
        };
        f("embedding", embedding);
        style.for_each(scoped("style."));
        text.for_each(scoped("text."));
        expressive.for_each(scoped("expressive."));
        temporal.for_each(scoped("temporal."));
        pitch.for_each(scoped("pitch."));
        dynamics.for_each(scoped("dynamics."));
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for_each([&n](const std::string &, Tensor &t) { n += t.size(); });
        return n;
    }
};

inline std::vector<MambaLayer> init_mamba_layers(std::size_t n, const ModelConfig &c, Rng &rng) {
    std::vector<MambaLayer> layers;
    for (std::size_t i = 0; i < n; ++i) {
        layers.push_back(init_mamba_layer(c.d_h, c.d_ssm, c.kernel, rng));
        layers.back().state_bound = c.state_bound;
    }
    return layers;
}

inline ConditioningModel init_conditioning_model(const ModelConfig &c, Rng &rng) {
    c.validate();
    ConditioningModel m;
    m.config = c;
    m.embedding = init_uniform(c.vocab, c.d_token, 1.0, rng);
    m.style = init_style_params(c.mel_bins, c.d_s, c.kernel, rng);

    m.text.in_proj = init_dense(c.d_token, c.d_h, rng);
    m.text.in_bias = Tensor(1, c.d_h);
    m.text.fwd = init_mamba_layers(c.text_layers, c, rng);
    m.text.bwd = init_mamba_layers(c.text_layers, c, rng);
    m.text.fusion = init_gated_fusion(c.d_h, c.tau, rng);
    m.text.adaln = init_adaln(c.d_s, c.d_h, rng);

    m.expressive.in_proj = init_dense(c.mel_bins, c.d_h, rng);
    m.expressive.in_bias = Tensor(1, c.d_h);
    m.expressive.gate_u = init_dense(c.d_h, c.d_h, rng);
    m.expressive.adaln = init_adaln(c.d_s, c.d_h, rng);
    m.expressive.layers = init_mamba_layers(c.expressive_layers, c, rng);

    m.temporal.in_proj = init_dense(c.d_s, c.d_h, rng);
    m.temporal.in_bias = Tensor(1, c.d_h);
    m.temporal.gate_u = init_dense(c.d_h, c.d_h, rng);
    m.temporal.conv = init_uniform(c.d_h, c.kernel, 1.0 / std::sqrt(static_cast<double>(c.kernel)), rng);
    m.temporal.fwd = init_mamba_layers(c.temporal_layers, c, rng);
    m.temporal.bwd = init_mamba_layers(c.temporal_layers, c, rng);
    m.temporal.w_f = init_dense(2 * c.d_h, c.d_h, rng);
    m.temporal.gated_fusion = c.temporal_gated_fusion;
    if (c.temporal_gated_fusion)
        m.temporal.fusion = init_gated_fusion(c.d_h, c.tau, rng);

    m.pitch = init_pitch_params(c.d_h, c.tau, rng);
    m.dynamics = init_dynamics(c.d_h, c.d_ssm, c.kernel, c.tau, rng);
    m.dynamics.block.state_bound = c.state_bound;
    return m;
}

inline ConditioningModel init_conditioning_model(const ModelConfig &c) {
    Rng rng(c.seed);
    return init_conditioning_model(c, rng);
}

// ─── Checkpoints ─────────────────────────────────────────────────────────────
//
// A directory holding manifest.json plus one MVCT file per named tensor.

using NamedTensorVisitor = std::function<void(const std::function<void(const std::string &, Tensor &)> &)>;

inline std::string tensor_file_name(const std::string &name) { return name + ".mvct"; }

inline void save_checkpoint(const std::filesystem::path &dir, const ModelConfig &config, const NamedTensorVisitor &visit,
                            const nlohmann::json &extra = nlohmann::json::object()) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "ssmcond-checkpoint";
    manifest["version"] = 1;
    manifest["config"] = config;
    manifest["tensors"] = nlohmann::json::array();
    for (auto it = extra.begin(); it != extra.end(); ++it)
        manifest[it.key()] = it.value();
    visit([&](const std::string &name, Tensor &t) {
        write_tensor(t, dir / tensor_file_name(name));
        manifest["tensors"].push_back({{"name", name}, {"file", tensor_file_name(name)}, {"shape", {t.rows(), t.cols()}}});
    });
    std::ofstream out(dir / "manifest.json");
    if (!out)
        throw Error("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

inline nlohmann::json read_manifest(const std::filesystem::path &dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in)
        throw Error("cannot read " + (dir / "manifest.json").string());
    nlohmann::json j = nlohmann::json::parse(in);
    if (j.value("format", "") != "ssmcond-checkpoint")
        throw Error((dir / "manifest.json").string() + ": not an ssmcond checkpoint manifest");
    return j;
}

// Fills every tensor the visitor names from the checkpoint; shapes must match.
// Tensors in the checkpoint that the visitor does not name are ignored.
inline void load_tensors(const std::filesystem::path &dir, const nlohmann::json &manifest, const NamedTensorVisitor &visit) {
    std::map<std::string, std::string> files;
    for (const auto &t : manifest.at("tensors"))
        files[t.at("name").get<std::string>()] = t.at("file").get<std::string>();
    visit([&](const std::string &name, Tensor &t) {
        auto it = files.find(name);
        if (it == files.end())
            throw Error(detail::concat("checkpoint ", dir.string(), " has no tensor '", name, "'"));
        Tensor loaded = read_tensor(dir / it->second);
        if (!loaded.same_shape(t))
            throw ShapeError(detail::concat("checkpoint tensor '", name, "' is ", loaded.shape_str(), ", model expects ",
                                            t.shape_str()));
        t = std::move(loaded);
    });
}

inline void save_conditioning_model(const std::filesystem::path &dir, ConditioningModel &m) {
    save_checkpoint(dir, m.config, [&m](const auto &f) { m.for_each(f); });
}

inline ConditioningModel load_conditioning_model(const std::filesystem::path &dir) {
    const nlohmann::json manifest = read_manifest(dir);
    ModelConfig config = manifest.at("config").get<ModelConfig>();
    ConditioningModel m = init_conditioning_model(config);
    load_tensors(dir, manifest, [&m](const auto &f) { m.for_each(f); });
    return m;
}

} // namespace ssmcond
