#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "ssmcond/ssmcond.hpp"

using namespace ssmcond;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Writes to --out when given, else stdout.
class Output {
  public:
    explicit Output(const std::string &path) {
        if (!path.empty()) {
            file_.open(path);
            if (!file_)
                throw Error("cannot write " + path);
        }
    }
    std::ostream &stream() { return file_.is_open() ? file_ : std::cout; }

  private:
    std::ofstream file_;
};

std::string read_text(const fs::path &p) {
    std::ifstream in(p);
    if (!in)
        throw Error("cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

MelSpectrogram load_mel(const fs::path &p) {
    if (p.extension() == ".wav")
        return compute_mel(load_wav(p));
    return MelSpectrogram{read_tensor(p)};
}

// ─── Framed stdin/stdout for streaming ──────────────────────────────────────

bool read_exact(std::istream &in, char *buf, std::size_t n) {
    in.read(buf, static_cast<std::streamsize>(n));
    if (in.gcount() == 0 && n > 0)
        return false;
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw Error("stream: truncated chunk on standard input");
    return true;
}

std::uint32_t u32_le(const unsigned char *b) {
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 | static_cast<std::uint32_t>(b[2]) << 16 |
           static_cast<std::uint32_t>(b[3]) << 24;
}

void put_u32_le(std::ostream &out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char *>(b), 4);
}

void write_chunk(std::ostream &out, const Tensor &y) {
    put_u32_le(out, static_cast<std::uint32_t>(y.rows()));
    for (double v : y.values())
        put_u32_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    out.flush();
}

// ─── Subcommands ─────────────────────────────────────────────────────────────

int cmd_mel(const std::string &wav, const std::string &out) {
    const MelSpectrogram m = compute_mel(load_wav(wav));
    write_tensor(m.values, out);
    std::cout << json{{"bins", m.bins()}, {"frames", m.frames()}, {"out", out}}.dump() << '\n';
    return 0;
}

int cmd_condition(const std::string &ckpt, const std::string &tokens, const std::string &refmel, const std::string &out) {
    const ConditioningModel m = load_conditioning_model(ckpt);
    const ConditioningResult r = condition(m, parse_phonemes(read_text(tokens)), load_mel(refmel));
    write_tensor(r.h_d.packed, out);
    std::cout << json{{"frames", r.h_d.frames()}, {"width", r.h_d.width()}, {"out", out}}.dump() << '\n';
    return 0;
}

int cmd_stream(const std::string &ckpt, double lookahead_sec, const std::string &refmel) {
    const ConditioningModel m = load_conditioning_model(ckpt);
    std::optional<StyleEmbedding> style;
    if (!refmel.empty())
        style = style_embed(load_mel(refmel), m.style);
    StreamSession s(m, lookahead_sec, style);
    const std::size_t width = m.config.d_token;
    std::ios::sync_with_stdio(false);
    unsigned char header[4];
    while (read_exact(std::cin, reinterpret_cast<char *>(header), 4)) {
        const std::uint32_t n = u32_le(header);
        std::vector<unsigned char> payload(static_cast<std::size_t>(n) * width * 4);
        if (!payload.empty() && !read_exact(std::cin, reinterpret_cast<char *>(payload.data()), payload.size()))
            throw Error("stream: missing payload after chunk header");
        Tensor x(n, width);
        for (std::size_t i = 0; i < x.size(); ++i)
            x[i] = static_cast<double>(std::bit_cast<float>(u32_le(&payload[4 * i])));
        write_chunk(std::cout, s.feed(x));
    }
    write_chunk(std::cout, s.close());
    std::cerr << json{{"fed", s.fed()}, {"emitted", s.emitted()}, {"lookahead_frames", s.lookahead()}}.dump() << '\n';
    return 0;
}

ModelConfig bench_model(const std::string &config_path) {
    ModelConfig c = bench::small_config();
    if (!config_path.empty())
        c = json::parse(read_text(config_path)).get<ModelConfig>();
    c.seed = seed_from_env(c.seed);
    c.validate();
    return c;
}

int cmd_bench(const std::string &kind, std::vector<std::size_t> frames, std::size_t repeats, const std::string &mode,
              double lookahead_sec, const std::string &config_path, const std::string &out_path) {
    const ModelConfig c = bench_model(config_path);
    Output out(out_path);
    if (kind == "breakdown") {
        const std::size_t t_m = frames.empty() ? 2048 : frames.front();
        bench::write_breakdown_csv(bench::breakdown(c, std::max<std::size_t>(t_m / 4, 1), t_m, repeats), out.stream());
        return 0;
    }
    if (kind == "scaling") {
        if (frames.empty())
            frames = {4096, 8192, 16384};
        const auto rows = bench::scaling(c, frames, repeats);
        out.stream() << "# full conditioning stack, T_x = T/4; pass band is 0.85r..1.15r for size ratio r\n";
        bench::write_scaling_csv(rows, out.stream());
        return std::all_of(rows.begin(), rows.end(), [](const auto &r) { return r.pass; }) ? 0 : 1;
    }
    if (kind == "memory") {
        if (frames.empty())
            frames = {1000, 100000};
        const auto m = mode == "offline" ? bench::MemoryMode::offline : bench::MemoryMode::stream;
        const auto rows = bench::audit_memory(c, frames, m, lookahead_frames(lookahead_sec));
        out.stream() << "frames,peak_elements\n";
        for (const auto &r : rows)
            out.stream() << r.frames << ',' << r.peak << '\n';
        return 0;
    }
    throw Error("bench: unknown kind '" + kind + "' (breakdown, scaling or memory)");
}

int cmd_sweep(const std::string &grid_path, const std::string &config_path, const std::string &out_path) {
    bench::SweepGrid grid;
    if (!grid_path.empty())
        grid = json::parse(read_text(grid_path)).get<bench::SweepGrid>();
    ModelConfig base = bench_model(config_path);
    base.mel_bins = kMelBins;
    const auto rows = bench::sweep(grid, base, synthetic_dataset(4, base.vocab, 7), base.seed);
    Output out(out_path);
    bench::write_sweep_csv(rows, out.stream());
    std::cerr << json{{"rows", rows.size()}, {"runtime_trend_ok", bench::runtime_trend_ok(rows)}}.dump() << '\n';
    return 0;
}

// Every *.txt under the corpus is a token file; a .wav or .mvct with the same
// stem supplies the style, otherwise the style vector is zero.
int cmd_gate_stats(const std::string &ckpt, const std::string &corpus, const std::string &out_path) {
    const ConditioningModel m = load_conditioning_model(ckpt);
    std::vector<fs::path> files;
    for (const auto &entry : fs::directory_iterator(corpus))
        if (entry.path().extension() == ".txt")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw Error("gate-stats: no .txt token files in " + corpus);
    std::vector<Tensor> traces;
    for (const fs::path &f : files) {
        StyleEmbedding e{Tensor(1, m.config.d_s)};
        for (const char *ext : {".wav", ".mvct"}) {
            fs::path ref = f;
            ref.replace_extension(ext);
            if (fs::exists(ref)) {
                e = style_embed(load_mel(ref), m.style);
                break;
            }
        }
        const Tensor x = embed_tokens(parse_phonemes(read_text(f)), m.embedding);
        traces.push_back(text_encode(x, e, m.text).gates);
    }
    const bench::GateStats s = bench::gate_stats(traces);
    Output out(out_path);
    out.stream() << json{{"utterances", traces.size()}, {"mean_fwd", s.mean_fwd}, {"mean_bwd", s.mean_bwd}, {"var", s.var}}.dump(2)
                 << '\n';
    return 0;
}

int cmd_train_toy(const std::string &config_path, const std::string &ckpt_out, const std::string &out_path) {
    ToyRunConfig cfg = config_path.empty() ? parse_toy_run(json::object()) : load_toy_run(config_path);
    cfg.train.seed = seed_from_env(cfg.train.seed);
    cfg.model.seed = seed_from_env(cfg.model.seed);
    TrainResult r = run_toy(cfg);
    Output out(out_path);
    write_loss_csv(r.log, out.stream());
    if (!ckpt_out.empty())
        save_training_checkpoint(ckpt_out, r, cfg.train);
    std::cerr << json{{"initial_loss", r.log.front().loss}, {"final_loss", r.log.back().loss}}.dump() << '\n';
    return 0;
}

int cmd_gradcheck(const std::string &out_path) {
    const auto checks = module_grad_checks(seed_from_env(92));
    Output out(out_path);
    out.stream() << "module,max_rel_error,coordinates,tolerance,pass\n";
    bool all = true;
    for (const auto &c : checks) {
        out.stream() << c.name << ',' << c.result.max_rel_error << ',' << c.result.coordinates << ',' << c.tolerance << ','
                     << (c.ok() ? "PASS" : "FAIL") << '\n';
        all = all && c.ok();
    }
    return all ? 0 : 1;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"SSM-only TTS conditioning engine"};
    app.require_subcommand(1);

    std::string wav, mvct_out, ckpt, tokens, refmel, out, config, grid, corpus, ckpt_out, kind, mode = "stream";
    double lookahead_sec = 0.5;
    std::size_t repeats = 5;
    std::vector<std::size_t> frames;

    auto *mel = app.add_subcommand("mel", "log-mel spectrogram of a WAV file, written as MVCT");
    mel->add_option("wav", wav)->required()->check(CLI::ExistingFile);
    mel->add_option("out", mvct_out)->required();

    auto *cond = app.add_subcommand("condition", "conditioning sequence h_D for a token file and reference mel");
    cond->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingDirectory);
    cond->add_option("--tokens", tokens)->required()->check(CLI::ExistingFile);
    cond->add_option("--refmel", refmel, "MVCT mel (F x T_m) or WAV")->required()->check(CLI::ExistingFile);
    cond->add_option("--out", mvct_out)->required();

    auto *stream = app.add_subcommand("stream", "framed streaming encoder on stdin/stdout");
    stream->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingDirectory);
    stream->add_option("--lookahead-sec", lookahead_sec)->check(CLI::NonNegativeNumber);
    stream->add_option("--refmel", refmel, "style reference")->check(CLI::ExistingFile);

    auto *bench = app.add_subcommand("bench", "runtime breakdown, scaling or memory audit");
    bench->add_option("kind", kind)->required()->check(CLI::IsMember({"breakdown", "scaling", "memory"}));
    bench->add_option("--T", frames, "frame counts");
    bench->add_option("--repeats", repeats)->check(CLI::Range(3, 1000));
    bench->add_option("--mode", mode)->check(CLI::IsMember({"offline", "stream"}));
    bench->add_option("--lookahead-sec", lookahead_sec)->check(CLI::NonNegativeNumber);
    bench->add_option("--config", config, "model config JSON")->check(CLI::ExistingFile);
    bench->add_option("--out", out);

    auto *sweep = app.add_subcommand("sweep", "sensitivity sweep over d_ssm, k and tau");
    sweep->add_option("--grid", grid)->check(CLI::ExistingFile);
    sweep->add_option("--config", config)->check(CLI::ExistingFile);
    sweep->add_option("--out", out);

    auto *gates = app.add_subcommand("gate-stats", "text fusion gate statistics over a token corpus");
    gates->add_option("--ckpt", ckpt)->required()->check(CLI::ExistingDirectory);
    gates->add_option("--corpus", corpus)->required()->check(CLI::ExistingDirectory);
    gates->add_option("--out", out);

    auto *train = app.add_subcommand("train-toy", "toy training run on the synthetic tone set");
    train->add_option("--config", config)->check(CLI::ExistingFile);
    train->add_option("--ckpt-out", ckpt_out, "checkpoint directory to write");
    train->add_option("--out", out, "loss CSV");

    auto *gc = app.add_subcommand("gradcheck", "finite-difference gradient checks per module and end to end");
    gc->add_option("--out", out);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*mel)
            return cmd_mel(wav, mvct_out);
        if (*cond)
            return cmd_condition(ckpt, tokens, refmel, mvct_out);
        if (*stream)
            return cmd_stream(ckpt, lookahead_sec, refmel);
        if (*bench)
            return cmd_bench(kind, frames, repeats, mode, lookahead_sec, config, out);
        if (*sweep)
            return cmd_sweep(grid, config, out);
        if (*gates)
            return cmd_gate_stats(ckpt, corpus, out);
        if (*train)
            return cmd_train_toy(config, ckpt_out, out);
        if (*gc)
            return cmd_gradcheck(out);
    } catch (const std::exception &e) {
        std::cerr << "ssmcond: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
