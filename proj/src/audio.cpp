#include "lorp/audio.hpp"

#include "lorp/util.hpp"

#include <cmath>
#include <cstring>

namespace lorp::audio {

void MelConfig::validate() const {
    if (sample_rate < 1) throw std::invalid_argument("mel config: bad sample rate");
    if (fft_size < 2 || (fft_size & (fft_size - 1)) != 0)
        throw std::invalid_argument("mel config: fft_size must be a power of two");
    if (hop < 1 || hop > fft_size) throw std::invalid_argument("mel config: hop must be in [1, fft_size]");
    if (mels < 1) throw std::invalid_argument("mel config: mels must be >= 1");
    if (fmax > sample_rate / 2.0) throw std::invalid_argument("mel config: fmax above Nyquist");
    if (fmin < 0.0 || fmin >= fmax) throw std::invalid_argument("mel config: bad fmin/fmax");
    if (log_floor <= 0.0) throw std::invalid_argument("mel config: log_floor must be > 0");
}

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft: size must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<double> u = a[i + k];
                std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hann_window(int n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        w[static_cast<size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / n));
    return w;
}

// reflect-padded sample access: ... x2 x1 | x0 x1 ... xN-1 | xN-2 xN-3 ...
double sample_at(const std::vector<double>& x, long idx) {
    const long n = static_cast<long>(x.size());
    if (idx < 0) idx = -idx;
    if (idx >= n) idx = 2 * (n - 1) - idx;
    if (idx < 0 || idx >= n) throw std::invalid_argument("mel: waveform too short for reflection");
    return x[static_cast<size_t>(idx)];
}

// magnitude spectrogram, frames x (fft/2+1)
Matrix stft_magnitude(const std::vector<double>& wav, const MelConfig& c,
                      std::vector<std::vector<std::complex<double>>>* spectra = nullptr) {
    const int bins = c.fft_size / 2 + 1;
    const int frames = 1 + static_cast<int>(wav.size()) / c.hop;
    const std::vector<double> win = hann_window(c.fft_size);
    Matrix mag(frames, bins);
    if (spectra) spectra->assign(static_cast<size_t>(frames), {});
    std::vector<std::complex<double>> buf(static_cast<size_t>(c.fft_size));
    for (int f = 0; f < frames; ++f) {
        long center = static_cast<long>(f) * c.hop;
        for (int i = 0; i < c.fft_size; ++i)
            buf[static_cast<size_t>(i)] = sample_at(wav, center - c.fft_size / 2 + i) *
                                          win[static_cast<size_t>(i)];
        fft_inplace(buf, false);
        for (int b = 0; b < bins; ++b) mag(f, b) = std::abs(buf[static_cast<size_t>(b)]);
        if (spectra)
            (*spectra)[static_cast<size_t>(f)] =
                std::vector<std::complex<double>>(buf.begin(), buf.begin() + bins);
    }
    return mag;
}

std::vector<double> istft(const std::vector<std::vector<std::complex<double>>>& spectra,
                          const MelConfig& c, size_t out_len) {
    const int frames = static_cast<int>(spectra.size());
    const std::vector<double> win = hann_window(c.fft_size);
    const long padded_len = static_cast<long>(frames - 1) * c.hop + c.fft_size;
    std::vector<double> acc(static_cast<size_t>(padded_len), 0.0);
    std::vector<double> norm(static_cast<size_t>(padded_len), 0.0);
    std::vector<std::complex<double>> buf(static_cast<size_t>(c.fft_size));
    for (int f = 0; f < frames; ++f) {
        for (int b = 0; b <= c.fft_size / 2; ++b) {
            buf[static_cast<size_t>(b)] = spectra[static_cast<size_t>(f)][static_cast<size_t>(b)];
            if (b > 0 && b < c.fft_size / 2)
                buf[static_cast<size_t>(c.fft_size - b)] = std::conj(buf[static_cast<size_t>(b)]);
        }
        fft_inplace(buf, true);
        long base = static_cast<long>(f) * c.hop;
        for (int i = 0; i < c.fft_size; ++i) {
            acc[static_cast<size_t>(base + i)] += buf[static_cast<size_t>(i)].real() *
                                                  win[static_cast<size_t>(i)];
            norm[static_cast<size_t>(base + i)] += win[static_cast<size_t>(i)] *
                                                   win[static_cast<size_t>(i)];
        }
    }
    // drop the centering pad and normalize by the window-square sum
    std::vector<double> out(out_len, 0.0);
    const long pad = c.fft_size / 2;
    for (size_t i = 0; i < out_len; ++i) {
        long j = static_cast<long>(i) + pad;
        if (j < padded_len && norm[static_cast<size_t>(j)] > 1e-10)
            out[i] = acc[static_cast<size_t>(j)] / norm[static_cast<size_t>(j)];
    }
    return out;
}

Matrix mel_pinv(const Matrix& fb) {
    // right pseudo-inverse: fb^T (fb fb^T)^-1, ridge-stabilized
    Matrix gram = fb * fb.transpose();
    gram.diagonal().array() += 1e-10;
    return fb.transpose() * gram.ldlt().solve(Matrix::Identity(fb.rows(), fb.rows()));
}

Matrix features_to_magnitudes(const FeatureSequence& features, const MelConfig& c) {
    if (features.dim() != c.mels)
        throw std::invalid_argument("griffin_lim: feature dim does not match mel config");
    Matrix mel_amp = features.frames.array().exp();  // undo the log
    Matrix mag = (mel_pinv(mel_filterbank(c)) * mel_amp.transpose()).cwiseMax(0.0);
    return mag;  // bins x frames
}

}  // namespace

Matrix mel_filterbank(const MelConfig& c) {
    c.validate();
    const int bins = c.fft_size / 2 + 1;
    const double mel_lo = hz_to_mel(c.fmin);
    const double mel_hi = hz_to_mel(c.fmax);
    std::vector<double> pts(static_cast<size_t>(c.mels) + 2);
    for (int i = 0; i < c.mels + 2; ++i)
        pts[static_cast<size_t>(i)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (c.mels + 1));
    Matrix fb = Matrix::Zero(c.mels, bins);
    for (int m = 0; m < c.mels; ++m) {
        double lo = pts[static_cast<size_t>(m)];
        double mid = pts[static_cast<size_t>(m) + 1];
        double hi = pts[static_cast<size_t>(m) + 2];
        for (int b = 0; b < bins; ++b) {
            double f = static_cast<double>(b) * c.sample_rate / c.fft_size;
            if (f > lo && f < mid)
                fb(m, b) = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                fb(m, b) = (hi - f) / (hi - mid);
        }
    }
    return fb;
}

std::vector<double> filter_center_freqs(const MelConfig& c) {
    const double mel_lo = hz_to_mel(c.fmin);
    const double mel_hi = hz_to_mel(c.fmax);
    std::vector<double> centers(static_cast<size_t>(c.mels));
    for (int m = 0; m < c.mels; ++m)
        centers[static_cast<size_t>(m)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * (m + 1) / (c.mels + 1));
    return centers;
}

FeatureSequence mel_frontend(const std::vector<double>& waveform, const MelConfig& c) {
    c.validate();
    if (static_cast<int>(waveform.size()) < c.fft_size)
        throw std::invalid_argument("mel_frontend: waveform shorter than the analysis window");
    Matrix mag = stft_magnitude(waveform, c);
    Matrix mel = mag * mel_filterbank(c).transpose();  // frames x mels
    FeatureSequence out;
    out.frames = mel.cwiseMax(c.log_floor).array().log();
    out.frame_rate = static_cast<double>(c.sample_rate) / c.hop;
    return out;
}

std::vector<double> griffin_lim(const FeatureSequence& features, const MelConfig& c,
                                int iterations, uint64_t seed) {
    c.validate();
    if (iterations < 0) throw std::invalid_argument("griffin_lim: negative iteration count");
    Matrix mag = features_to_magnitudes(features, c);  // bins x frames
    const int frames = static_cast<int>(mag.cols());
    const int bins = static_cast<int>(mag.rows());
    const size_t out_len = static_cast<size_t>(std::max(0, frames - 1)) * c.hop + c.hop;

    Rng rng(derive_seed(seed, "griffin-lim"));
    std::vector<std::vector<std::complex<double>>> spectra(static_cast<size_t>(frames));
    for (int f = 0; f < frames; ++f) {
        spectra[static_cast<size_t>(f)].resize(static_cast<size_t>(bins));
        for (int b = 0; b < bins; ++b) {
            double phase = rng.uniform(0.0, 2.0 * M_PI);
            spectra[static_cast<size_t>(f)][static_cast<size_t>(b)] =
                std::polar(mag(b, f), phase);
        }
    }

    std::vector<double> wav = istft(spectra, c, out_len);
    for (int it = 0; it < iterations; ++it) {
        std::vector<std::vector<std::complex<double>>> analyzed;
        stft_magnitude(wav, c, &analyzed);
        const int n = std::min(frames, static_cast<int>(analyzed.size()));
        for (int f = 0; f < n; ++f)
            for (int b = 0; b < bins; ++b) {
                std::complex<double> z = analyzed[static_cast<size_t>(f)][static_cast<size_t>(b)];
                double a = std::abs(z);
                spectra[static_cast<size_t>(f)][static_cast<size_t>(b)] =
                    a > 1e-12 ? z / a * mag(b, f) : std::polar(mag(b, f), 0.0);
            }
        wav = istft(spectra, c, out_len);
    }
    return wav;
}

double reanalysis_error(const std::vector<double>& waveform, const FeatureSequence& features,
                        const MelConfig& c) {
    Matrix target = features_to_magnitudes(features, c);  // bins x frames
    Matrix got = stft_magnitude(waveform, c).transpose();
    const int frames = std::min(static_cast<int>(target.cols()), static_cast<int>(got.cols()));
    return (target.leftCols(frames) - got.leftCols(frames)).norm();
}

std::vector<Segment> segment_silence(const std::vector<double>& waveform, double rms_threshold,
                                     double min_sec, double max_sec, int sample_rate) {
    if (rms_threshold < 0.0) throw std::invalid_argument("segment_silence: negative threshold");
    const int frame = sample_rate / 40;  // 25 ms
    const int hop = sample_rate / 100;   // 10 ms
    const long n = static_cast<long>(waveform.size());
    std::vector<Segment> out;
    if (n < frame) return out;

    long run_begin = -1;
    auto flush = [&](long run_end) {
        if (run_begin < 0) return;
        double sec = static_cast<double>(run_end - run_begin) / sample_rate;
        if (sec >= min_sec && sec <= max_sec) out.push_back({run_begin, run_end});
        run_begin = -1;
    };
    for (long start = 0; start + frame <= n; start += hop) {
        double acc = 0.0;
        for (long i = start; i < start + frame; ++i) acc += waveform[static_cast<size_t>(i)] *
                                                            waveform[static_cast<size_t>(i)];
        double rms = std::sqrt(acc / frame);
        if (rms >= rms_threshold) {
            if (run_begin < 0) run_begin = start;
        } else {
            flush(start);
        }
    }
    flush(n);
    return out;
}

// ---------------------------------------------------------------------------
// WAV (16-bit PCM mono)

void write_wav16(const std::filesystem::path& path, const std::vector<double>& samples,
                 int sample_rate) {
    std::string bytes;
    auto put_u32 = [&](uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes.push_back(char((v >> (8 * i)) & 0xff));
    };
    auto put_u16 = [&](uint16_t v) {
        for (int i = 0; i < 2; ++i) bytes.push_back(char((v >> (8 * i)) & 0xff));
    };
    const uint32_t data_len = static_cast<uint32_t>(samples.size() * 2);
    bytes += "RIFF";
    put_u32(36 + data_len);
    bytes += "WAVEfmt ";
    put_u32(16);
    put_u16(1);  // PCM
    put_u16(1);  // mono
    put_u32(static_cast<uint32_t>(sample_rate));
    put_u32(static_cast<uint32_t>(sample_rate * 2));
    put_u16(2);
    put_u16(16);
    bytes += "data";
    put_u32(data_len);
    for (double s : samples) {
        double clamped = std::clamp(s, -1.0, 1.0);
        int16_t q = static_cast<int16_t>(std::lround(clamped * 32767.0));
        bytes.push_back(char(q & 0xff));
        bytes.push_back(char((q >> 8) & 0xff));
    }
    write_file(path, bytes);
}

std::vector<double> read_wav16(const std::filesystem::path& path, int* sample_rate) {
    std::string bytes = read_file(path);
    auto u32 = [&](size_t pos) {
        return uint32_t(uint8_t(bytes[pos])) | (uint32_t(uint8_t(bytes[pos + 1])) << 8) |
               (uint32_t(uint8_t(bytes[pos + 2])) << 16) | (uint32_t(uint8_t(bytes[pos + 3])) << 24);
    };
    auto u16 = [&](size_t pos) {
        return uint16_t(uint8_t(bytes[pos])) | (uint16_t(uint8_t(bytes[pos + 1])) << 8);
    };
    if (bytes.size() < 44 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
        throw std::runtime_error("wav: not a RIFF/WAVE file: " + path.string());
    size_t pos = 12;
    int rate = 0;
    int channels = 0;
    int bits = 0;
    std::vector<double> samples;
    while (pos + 8 <= bytes.size()) {
        std::string id = bytes.substr(pos, 4);
        uint32_t len = u32(pos + 4);
        pos += 8;
        if (id == "fmt ") {
            if (u16(pos) != 1) throw std::runtime_error("wav: only PCM supported");
            channels = u16(pos + 2);
            rate = static_cast<int>(u32(pos + 4));
            bits = u16(pos + 14);
        } else if (id == "data") {
            if (channels != 1 || bits != 16)
                throw std::runtime_error("wav: expected 16-bit mono PCM");
            size_t count = len / 2;
            samples.resize(count);
            for (size_t i = 0; i < count; ++i) {
                int16_t q = static_cast<int16_t>(u16(pos + 2 * i));
                samples[i] = static_cast<double>(q) / 32767.0;
            }
        }
        pos += len + (len & 1);
    }
    if (samples.empty()) throw std::runtime_error("wav: no data chunk in " + path.string());
    if (sample_rate) *sample_rate = rate;
    return samples;
}

}  // namespace lorp::audio
