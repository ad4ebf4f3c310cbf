#include "mteeg/preprocessing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mteeg/errors.hpp"

namespace mteeg {

namespace {

struct Biquad {
    double b0, b1, b2, a1, a2;  // a0 normalized to 1
};

// RBJ cookbook designs, bilinear transform.
Biquad design_lowpass(double freq_hz, double rate_hz, double q) {
    const double w0 = 2.0 * std::numbers::pi * freq_hz / rate_hz;
    const double c = std::cos(w0);
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    return {(1.0 - c) / 2.0 / a0, (1.0 - c) / a0, (1.0 - c) / 2.0 / a0, -2.0 * c / a0,
            (1.0 - alpha) / a0};
}

Biquad design_highpass(double freq_hz, double rate_hz, double q) {
    const double w0 = 2.0 * std::numbers::pi * freq_hz / rate_hz;
    const double c = std::cos(w0);
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    return {(1.0 + c) / 2.0 / a0, -(1.0 + c) / a0, (1.0 + c) / 2.0 / a0, -2.0 * c / a0,
            (1.0 - alpha) / a0};
}

Biquad design_notch(double freq_hz, double rate_hz, double q) {
    const double w0 = 2.0 * std::numbers::pi * freq_hz / rate_hz;
    const double c = std::cos(w0);
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    return {1.0 / a0, -2.0 * c / a0, 1.0 / a0, -2.0 * c / a0, (1.0 - alpha) / a0};
}

void apply_biquad_forward(const Biquad& f, double* x, std::int64_t n) {
    // direct form II transposed
    double s1 = 0.0;
    double s2 = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double in = x[i];
        const double out = f.b0 * in + s1;
        s1 = f.b1 * in - f.a1 * out + s2;
        s2 = f.b2 * in - f.a2 * out;
        x[i] = out;
    }
}

void apply_biquad(const Biquad& f, double* x, std::int64_t n, bool zero_phase) {
    apply_biquad_forward(f, x, n);
    if (zero_phase) {
        std::reverse(x, x + n);
        apply_biquad_forward(f, x, n);
        std::reverse(x, x + n);
    }
}

RawRecording filtered_copy(const RawRecording& rec, const std::vector<Biquad>& sections,
                           bool zero_phase) {
    RawRecording out = rec;
    out.samples = Tensor::from_data(rec.samples->shape, rec.samples->data);
    const std::int64_t n = rec.num_samples();
    for (std::int64_t c = 0; c < rec.channels(); ++c) {
        double* row = out.samples->data.data() + c * n;
        for (const auto& s : sections) {
            apply_biquad(s, row, n, zero_phase);
        }
    }
    return out;
}

double bessel_i0(double x) {
    // power series; converges quickly for the beta values used here
    const double half = x / 2.0;
    double term = 1.0;
    double sum = 1.0;
    for (int k = 1; k < 64; ++k) {
        term *= (half / k) * (half / k);
        sum += term;
        if (term < sum * 1e-18) {
            break;
        }
    }
    return sum;
}

std::int64_t integer_rate(double rate_hz, const char* what) {
    const double rounded = std::round(rate_hz);
    if (rate_hz <= 0.0 || std::abs(rate_hz - rounded) > 1e-9) {
        throw ConfigError(std::string(what) + ": sample rates must be positive integers in Hz");
    }
    return static_cast<std::int64_t>(rounded);
}

}  // namespace

RawRecording RawRecording::create(double rate_hz, std::int64_t channels, std::int64_t samples,
                                  std::vector<std::string> names) {
    if (rate_hz <= 0.0) {
        throw ConfigError("RawRecording: sample rate must be positive");
    }
    if (channels < 1 || samples < 1) {
        throw ConfigError("RawRecording: need at least one channel and one sample");
    }
    RawRecording rec;
    rec.sample_rate_hz = rate_hz;
    rec.samples = Tensor::create({channels, samples});
    if (names.empty()) {
        for (std::int64_t c = 0; c < channels; ++c) {
            names.push_back("CH" + std::to_string(c));
        }
    }
    if (static_cast<std::int64_t>(names.size()) != channels) {
        throw ConfigError("RawRecording: channel name count mismatch");
    }
    rec.channel_names = std::move(names);
    return rec;
}

RawRecording bandpass(const RawRecording& rec, double lo_hz, double hi_hz, bool zero_phase) {
    const double nyquist = rec.sample_rate_hz / 2.0;
    if (!(0.0 < lo_hz && lo_hz < hi_hz && hi_hz < nyquist)) {
        throw ConfigError("bandpass: need 0 < lo < hi < Nyquist");
    }
    // 4th-order Butterworth band-pass as a high-pass/low-pass biquad cascade.
    const double butterworth_q = 1.0 / std::sqrt(2.0);
    std::vector<Biquad> sections{design_highpass(lo_hz, rec.sample_rate_hz, butterworth_q),
                                 design_lowpass(hi_hz, rec.sample_rate_hz, butterworth_q)};
    return filtered_copy(rec, sections, zero_phase);
}

RawRecording notch(const RawRecording& rec, double mains_hz, double q, bool zero_phase) {
    if (mains_hz >= rec.sample_rate_hz / 2.0 || mains_hz <= 0.0) {
        throw ConfigError("notch: mains frequency must lie below Nyquist");
    }
    if (q <= 0.0) {
        throw ConfigError("notch: quality factor must be positive");
    }
    return filtered_copy(rec, {design_notch(mains_hz, rec.sample_rate_hz, q)}, zero_phase);
}

RawRecording resample(const RawRecording& rec, double target_hz) {
    if (target_hz <= 0.0) {
        throw ConfigError("resample: target rate must be positive");
    }
    if (target_hz == rec.sample_rate_hz) {
        return rec;  // bit-identical fast path
    }
    const std::int64_t source = integer_rate(rec.sample_rate_hz, "resample");
    const std::int64_t target = integer_rate(target_hz, "resample");
    const std::int64_t g = std::gcd(source, target);
    const std::int64_t up = target / g;    // interpolation factor
    const std::int64_t down = source / g;  // decimation factor

    const std::int64_t n = rec.num_samples();
    const std::int64_t out_n = static_cast<std::int64_t>(
        std::llround(static_cast<double>(n) * target_hz / rec.sample_rate_hz));
    if (out_n < 1) {
        throw ConfigError("resample: output would be empty");
    }

    // Kaiser-windowed sinc at the upsampled rate; cutoff at the tighter of
    // the two Nyquist limits.
    const double beta = 8.0;
    const std::int64_t zero_crossings = 16;
    const std::int64_t half = zero_crossings * std::max(up, down);
    const double cutoff = 0.5 / static_cast<double>(std::max(up, down));
    std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
    const double i0_beta = bessel_i0(beta);
    for (std::int64_t t = -half; t <= half; ++t) {
        const double x = 2.0 * cutoff * static_cast<double>(t);
        const double sinc = t == 0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
        const double r = static_cast<double>(t) / static_cast<double>(half);
        const double window = bessel_i0(beta * std::sqrt(1.0 - r * r)) / i0_beta;
        kernel[static_cast<std::size_t>(t + half)] = 2.0 * cutoff * sinc * window;
    }
    // Normalize each polyphase branch so DC passes with exactly unit gain.
    std::vector<double> phase_sum(static_cast<std::size_t>(up), 0.0);
    for (std::int64_t t = -half; t <= half; ++t) {
        const std::int64_t phase = ((t % up) + up) % up;
        phase_sum[static_cast<std::size_t>(phase)] += kernel[static_cast<std::size_t>(t + half)];
    }

    RawRecording out = rec;
    out.sample_rate_hz = target_hz;
    out.samples = Tensor::create({rec.channels(), out_n});
    for (std::int64_t c = 0; c < rec.channels(); ++c) {
        const double* src = rec.samples->data.data() + c * n;
        double* dst = out.samples->data.data() + c * out_n;
        for (std::int64_t m = 0; m < out_n; ++m) {
            const std::int64_t center = m * down;  // position on the upsampled grid
            const std::int64_t phase = center % up;
            // input samples sit at upsampled positions i*up; keep |center - i*up| <= half
            const std::int64_t first = std::max<std::int64_t>(0, (center - half + up - 1) / up);
            const std::int64_t last = std::min<std::int64_t>(n - 1, (center + half) / up);
            double acc = 0.0;
            for (std::int64_t i = first; i <= last; ++i) {
                const std::int64_t offset = center - i * up;
                acc += src[i] * kernel[static_cast<std::size_t>(offset + half)];
            }
            dst[m] = acc / phase_sum[static_cast<std::size_t>(phase)];
        }
    }
    return out;
}

RawRecording normalize_amplitude(const RawRecording& rec) {
    RawRecording out = rec;
    out.samples = Tensor::from_data(rec.samples->shape, rec.samples->data);
    for (auto& v : out.samples->data) {
        v /= 1e-4;  // 0.1 mV unit
    }
    out.unit = "0.1mV";
    return out;
}

PatchGrid segment_patches(const RawRecording& rec, std::int64_t window) {
    if (window < 1) {
        throw ConfigError("segment_patches: window must be >= 1");
    }
    const std::int64_t n = rec.num_samples();
    const std::int64_t per_channel = n / window;
    if (per_channel < 1) {
        throw DataError("segment_patches: recording shorter than one window");
    }
    const std::int64_t channels = rec.channels();
    PatchGrid grid;
    grid.window = window;
    grid.channel_names = rec.channel_names;
    grid.patches = Tensor::create({channels, per_channel, window});
    for (std::int64_t c = 0; c < channels; ++c) {
        const double* src = rec.samples->data.data() + c * n;
        double* dst = grid.patches->data.data() + c * per_channel * window;
        std::copy_n(src, per_channel * window, dst);  // trailing remainder dropped
    }
    return grid;
}

RawRecording preprocess(const RawRecording& rec, const PipelineConfig& cfg) {
    RawRecording scaled = rec;
    if (cfg.input_unit_scale != 1.0) {
        scaled.samples = Tensor::from_data(rec.samples->shape, rec.samples->data);
        for (auto& v : scaled.samples->data) {
            v *= cfg.input_unit_scale;
        }
    }
    // Low-rate recordings cannot honor the nominal band edge or a mains notch
    // at/above Nyquist; the band clamps and the notch drops out.
    const double nyquist = rec.sample_rate_hz / 2.0;
    const double hi = std::min(cfg.bandpass_hi_hz, 0.9 * nyquist);
    auto banded = bandpass(scaled, cfg.bandpass_lo_hz, hi, cfg.zero_phase);
    auto conditioned = cfg.mains_hz < 0.95 * nyquist
                           ? notch(banded, cfg.mains_hz, cfg.notch_q, cfg.zero_phase)
                           : banded;
    auto resampled = resample(conditioned, cfg.target_rate_hz);
    return normalize_amplitude(resampled);
}

RawRecording concat_patches(const PatchGrid& grid, double sample_rate_hz) {
    const std::int64_t channels = grid.channels();
    const std::int64_t n = grid.patches_per_channel() * grid.window;
    auto rec = RawRecording::create(sample_rate_hz, channels, n, grid.channel_names);
    std::copy(grid.patches->data.begin(), grid.patches->data.end(), rec.samples->data.begin());
    return rec;
}

}  // namespace mteeg
