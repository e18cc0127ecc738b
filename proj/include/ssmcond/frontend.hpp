#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssmcond/eager.hpp"
#include "ssmcond/numerics.hpp"
#include "ssmcond/rng.hpp"
#include "ssmcond/tensor_io.hpp"

namespace ssmcond {

inline constexpr int kSampleRate = 24000;
inline constexpr std::size_t kFftSize = 1024;
inline constexpr std::size_t kHopSize = 256;
inline constexpr std::size_t kMelBins = 80;
inline constexpr double kMelFmax = 12000.0;
inline constexpr double kFramesPerSecond = static_cast<double>(kSampleRate) / static_cast<double>(kHopSize); // 93.75

// ─── Domain types ────────────────────────────────────────────────────────────

struct Waveform {
    std::vector<double> samples;
    int sample_rate = kSampleRate;
};

// F × T_m log-mel energies, every value >= ln(kEps).
struct MelSpectrogram {
    Tensor values;

    std::size_t bins() const { return values.rows(); }
    std::size_t frames() const { return values.cols(); }
    // T_m × F, the time-major layout the encoders consume.
    Tensor frames_major() const { return transpose(values); }
};

struct PhonemeSequence {
    std::vector<std::size_t> ids;
};

struct StyleEmbedding {
    Tensor values; // 1 × d_s

    std::size_t dim() const { return values.cols(); }
};

// ─── WAV input ───────────────────────────────────────────────────────────────

class WavError : public Error {
  public:
    enum class Kind { io, not_wave, unsupported_encoding, channels, sample_rate, bit_depth, truncated };
    WavError(Kind kind, const std::string &what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

  private:
    Kind kind_;
};

// RIFF/WAVE, PCM, 16-bit, mono, 24 kHz; anything else is rejected rather than
// converted.
inline Waveform decode_wav(std::span<const std::uint8_t> data, const std::string &origin = "<memory>") {
    using K = WavError::Kind;
    auto tag = [&](std::size_t at, const char *s) {
        return at + 4 <= data.size() && std::equal(s, s + 4, data.begin() + static_cast<std::ptrdiff_t>(at));
    };
    auto u16 = [&](std::size_t at) { return static_cast<std::uint32_t>(data[at] | (data[at + 1] << 8)); };
    auto u32 = [&](std::size_t at) { return u16(at) | (u16(at + 2) << 16); };

    if (data.size() < 12 || !tag(0, "RIFF") || !tag(8, "WAVE"))
        throw WavError(K::not_wave, origin + ": not a RIFF/WAVE file");

    bool have_fmt = false;
    std::uint32_t channels = 0, rate = 0, bits = 0;
    std::size_t pos = 12;
    while (pos + 8 <= data.size()) {
        const std::uint32_t size = u32(pos + 4);
        const std::size_t body = pos + 8;
        if (tag(pos, "fmt ")) {
            if (size < 16 || body + 16 > data.size())
                throw WavError(K::truncated, origin + ": truncated fmt chunk");
            const std::uint32_t format = u16(body);
            channels = u16(body + 2);
            rate = u32(body + 4);
            bits = u16(body + 14);
            if (format != 1)
                throw WavError(K::unsupported_encoding, detail::concat(origin, ": encoding ", format, " is not PCM"));
            have_fmt = true;
        } else if (tag(pos, "data")) {
            if (!have_fmt)
                throw WavError(K::not_wave, origin + ": data chunk before fmt chunk");
            if (channels != 1)
                throw WavError(K::channels, detail::concat(origin, ": ", channels, " channels, expected mono"));
            if (rate != static_cast<std::uint32_t>(kSampleRate))
                throw WavError(K::sample_rate, detail::concat(origin, ": sample rate ", rate, ", expected ", kSampleRate));
            if (bits != 16)
                throw WavError(K::bit_depth, detail::concat(origin, ": ", bits, "-bit samples, expected 16"));
            if (body + size > data.size())
                throw WavError(K::truncated, origin + ": truncated data chunk");
            Waveform w;
            w.samples.resize(size / 2);
            for (std::size_t i = 0; i < w.samples.size(); ++i)
                w.samples[i] = static_cast<double>(static_cast<std::int16_t>(u16(body + 2 * i))) / 32768.0;
            return w;
        }
        pos = body + size + (size & 1u);
    }
    throw WavError(have_fmt ? K::truncated : K::not_wave, origin + ": no data chunk");
}

inline Waveform load_wav(const std::filesystem::path &path) {
    bool ok = false;
    auto data = bytes::read_file(path, ok);
    if (!ok)
        throw WavError(WavError::Kind::io, "cannot read " + path.string());
    return decode_wav(data, path.string());
}

inline std::vector<std::uint8_t> encode_wav(const Waveform &w, std::uint16_t channels = 1, std::uint16_t bits = 16) {
    std::vector<std::uint8_t> out;
    auto tag = [&](const char *s) { out.insert(out.end(), s, s + 4); };
    auto u16 = [&](std::uint32_t v) {
        out.push_back(static_cast<std::uint8_t>(v));
        out.push_back(static_cast<std::uint8_t>(v >> 8));
    };
    const std::uint32_t bytes_per_sample = bits / 8u;
    const auto data_size = static_cast<std::uint32_t>(w.samples.size() * bytes_per_sample);
    tag("RIFF");
    bytes::put_u32(out, 36 + data_size);
    tag("WAVE");
    tag("fmt ");
    bytes::put_u32(out, 16);
    u16(1);
    u16(channels);
    bytes::put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
    bytes::put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * channels * bytes_per_sample);
    u16(channels * bytes_per_sample);
    u16(bits);
    tag("data");
    bytes::put_u32(out, data_size);
    for (double s : w.samples) {
        const double scaled = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
        const auto v = static_cast<std::int32_t>(scaled);
        if (bits == 16) {
            u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
        } else {
            for (std::uint32_t b = 0; b < bytes_per_sample; ++b)
                out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
        }
    }
    return out;
}

inline void write_wav(const Waveform &w, const std::filesystem::path &path) {
    if (!bytes::write_file(path, encode_wav(w)))
        throw WavError(WavError::Kind::io, "cannot write " + path.string());
}

// ─── Log-mel front end ───────────────────────────────────────────────────────

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// n_mels+2 band edges, equally spaced on the HTK mel scale.
inline std::vector<double> mel_band_edges(std::size_t n_mels = kMelBins, double fmin = 0.0, double fmax = kMelFmax) {
    std::vector<double> edges(n_mels + 2);
    const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
    for (std::size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
    return edges;
}

// Triangular filters, area-normalized (2 / bandwidth), n_mels × (n_fft/2+1).
inline Tensor mel_filterbank(std::size_t n_mels = kMelBins, std::size_t n_fft = kFftSize, int sample_rate = kSampleRate,
                             double fmin = 0.0, double fmax = kMelFmax) {
    const auto edges = mel_band_edges(n_mels, fmin, fmax);
    const std::size_t n_bins = n_fft / 2 + 1;
    Tensor w(n_mels, n_bins);
    for (std::size_t m = 0; m < n_mels; ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        const double norm = 2.0 / (hi - lo);
        for (std::size_t b = 0; b < n_bins; ++b) {
            const double f = static_cast<double>(b) * sample_rate / static_cast<double>(n_fft);
            const double rise = (f - lo) / (mid - lo);
            const double fall = (hi - f) / (hi - mid);
            w(m, b) = std::max(0.0, std::min(rise, fall)) * norm;
        }
    }
    return w;
}

inline std::vector<double> hann_window(std::size_t n = kFftSize) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    return w;
}

// Mirror index into [0, n). Repeats the reflection when the pad is longer
// than the signal; n == 1 maps everything to 0.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    if (n == 1)
        return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    std::ptrdiff_t m = i % period;
    if (m < 0)
        m += period;
    return static_cast<std::size_t>(m < static_cast<std::ptrdiff_t>(n) ? m : period - m);
}

inline std::size_t mel_frame_count(std::size_t samples) { return samples / kHopSize + 1; }

namespace detail {

// Shared r2c plan; execution with the new-array interface is thread-safe.
class PowerSpectrum {
  public:
    static const PowerSpectrum &instance() {
        static const PowerSpectrum p;
        return p;
    }

    // frame: kFftSize windowed samples → out: kFftSize/2+1 power values.
    void operator()(std::span<const double> frame, std::span<double> out) const {
        double *in = fftw_alloc_real(kFftSize);
        fftw_complex *spec = fftw_alloc_complex(kFftSize / 2 + 1);
        std::copy(frame.begin(), frame.end(), in);
        fftw_execute_dft_r2c(plan_, in, spec);
        for (std::size_t b = 0; b <= kFftSize / 2; ++b)
            out[b] = spec[b][0] * spec[b][0] + spec[b][1] * spec[b][1];
        fftw_free(spec);
        fftw_free(in);
    }

    PowerSpectrum(const PowerSpectrum &) = delete;
    PowerSpectrum &operator=(const PowerSpectrum &) = delete;

  private:
    PowerSpectrum() {
        static std::mutex planner_mutex;
        std::lock_guard lock(planner_mutex);
        double *in = fftw_alloc_real(kFftSize);
        fftw_complex *spec = fftw_alloc_complex(kFftSize / 2 + 1);
        plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(kFftSize), in, spec, FFTW_ESTIMATE);
        fftw_free(spec);
        fftw_free(in);
    }

    fftw_plan plan_;
};

} // namespace detail

// Hann window, FFT 1024, hop 256, centered reflect padding, power spectrum,
// 80-band HTK mel filterbank over 0-12 kHz, then ln(max(energy, 1e-5)).
inline MelSpectrogram compute_mel(const Waveform &w) {
    if (w.sample_rate != kSampleRate)
        throw Error(detail::concat("compute_mel: sample rate ", w.sample_rate, ", expected ", kSampleRate));
    if (w.samples.empty())
        throw Error("compute_mel: empty waveform");
    for (std::size_t i = 0; i < w.samples.size(); ++i)
        if (!std::isfinite(w.samples[i]))
            throw NonFiniteError(detail::concat("compute_mel: non-finite sample at ", i));

    static const Tensor bank = mel_filterbank();
    static const std::vector<double> window = hann_window();
    const auto &power = detail::PowerSpectrum::instance();

    const std::size_t n = w.samples.size();
    const std::size_t frames = mel_frame_count(n);
    const auto half = static_cast<std::ptrdiff_t>(kFftSize / 2);
    MelSpectrogram mel{Tensor(kMelBins, frames)};
    std::vector<double> frame(kFftSize), spec(kFftSize / 2 + 1);
    const double floor_log = std::log(kEps);
    for (std::size_t f = 0; f < frames; ++f) {
        const auto start = static_cast<std::ptrdiff_t>(f * kHopSize) - half;
        for (std::size_t i = 0; i < kFftSize; ++i)
            frame[i] = w.samples[reflect_index(start + static_cast<std::ptrdiff_t>(i), n)] * window[i];
        power(frame, spec);
        for (std::size_t m = 0; m < kMelBins; ++m) {
            double e = 0.0;
            for (std::size_t b = 0; b < spec.size(); ++b)
                e += bank(m, b) * spec[b];
            mel.values(m, f) = e > kEps ? std::log(e) : floor_log;
        }
    }
    return mel;
}

// ─── Tokens ──────────────────────────────────────────────────────────────────

// Whitespace-separated non-negative integers.
inline PhonemeSequence parse_phonemes(std::string_view text) {
    PhonemeSequence seq;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
            ++i;
        if (i == text.size())
            break;
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])))
            ++j;
        std::size_t v = 0;
        auto [ptr, ec] = std::from_chars(text.data() + i, text.data() + j, v);
        if (ec != std::errc{} || ptr != text.data() + j)
            throw Error(detail::concat("parse_phonemes: bad token '", text.substr(i, j - i), "' at position ", seq.ids.size()));
        seq.ids.push_back(v);
        i = j;
    }
    return seq;
}

inline void check_phonemes(const PhonemeSequence &p, std::size_t vocab) {
    for (std::size_t t = 0; t < p.ids.size(); ++t)
        if (p.ids[t] >= vocab)
            throw Error(detail::concat("phoneme id ", p.ids[t], " at position ", t, " is outside vocabulary of size ", vocab));
}

template <class Backend>
typename Backend::Value embed_tokens(Backend &be, const PhonemeSequence &p, const Tensor &table) {
    check_phonemes(p, table.rows());
    return be.gather_rows(be.param(table), p.ids);
}

inline Tensor embed_tokens(const PhonemeSequence &p, const Tensor &table) {
    Eager be;
    return embed_tokens(be, p, table);
}

// ─── Style embedding ─────────────────────────────────────────────────────────

// f_theta: depthwise conv over time on the mel frames, then a per-frame
// linear map with tanh. The embedding is its mean over frames.
struct StyleParams {
    Tensor conv;      // F × k
    Tensor proj;      // F × d_s
    Tensor proj_bias; // 1 × d_s

    template <class F> void for_each(F &&f) {
        f("conv", conv);
        f("proj", proj);
        f("proj_bias", proj_bias);
    }
};

inline StyleParams init_style_params(std::size_t mel_bins, std::size_t d_s, std::size_t k, Rng &rng) {
    StyleParams p;
    p.conv = init_uniform(mel_bins, k, 1.0 / std::sqrt(static_cast<double>(k)), rng);
    p.proj = init_dense(mel_bins, d_s, rng);
    p.proj_bias = Tensor(1, d_s);
    return p;
}

// Per-frame features f_theta(M[:,t]); T_m × d_s.
template <class Backend>
typename Backend::Value style_frame_features(Backend &be, const typename Backend::Value &mel_frames, const StyleParams &p) {
    auto h = be.depthwise_conv1d(mel_frames, be.param(p.conv), Padding::same);
    return be.tanh(be.add_row(be.matmul(h, be.param(p.proj)), be.param(p.proj_bias)));
}

template <class Backend>
typename Backend::Value style_embed(Backend &be, const typename Backend::Value &mel_frames, const StyleParams &p) {
    if (be.rows(mel_frames) == 0)
        throw ShapeError("style_embed: mel has no frames");
    return be.mean_rows(style_frame_features(be, mel_frames, p));
}

inline StyleEmbedding style_embed(const MelSpectrogram &m, const StyleParams &p) {
    if (m.frames() == 0)
        throw ShapeError("style_embed: mel has no frames");
    Eager be;
    return StyleEmbedding{style_embed(be, m.frames_major(), p)};
}

} // namespace ssmcond
