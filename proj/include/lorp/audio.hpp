#pragma once

#include "lorp/common.hpp"

#include <complex>
#include <filesystem>

namespace lorp::audio {

struct MelConfig {
    int sample_rate = 16000;
    int fft_size = 1024;  // also the analysis window length
    int hop = 256;
    int mels = 80;
    double fmin = 0.0;
    double fmax = 8000.0;
    double log_floor = 1e-5;

    void validate() const;
};

// Radix-2 complex FFT, in place. Size must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& data, bool inverse);

// Triangular mel filterbank, mels x (fft_size/2 + 1), HTK mel scale.
Matrix mel_filterbank(const MelConfig& config);

// Center frequency (Hz) of each triangular filter, for analytic checks.
std::vector<double> filter_center_freqs(const MelConfig& config);

// Magnitude STFT (Hann window, centered, reflect padding), mel projection,
// natural log with a floor. Frame count is 1 + floor(len / hop).
FeatureSequence mel_frontend(const std::vector<double>& waveform, const MelConfig& config);

// Phase reconstruction from log-mel features via the filterbank
// pseudo-inverse. 0 iterations returns the random-phase inversion.
std::vector<double> griffin_lim(const FeatureSequence& features, const MelConfig& config,
                                int iterations, uint64_t seed);

// L2 distance between the target linear magnitudes (pseudo-inverted from the
// features) and the re-analysis of a waveform. Griffin-Lim's progress metric.
double reanalysis_error(const std::vector<double>& waveform, const FeatureSequence& features,
                        const MelConfig& config);

struct Segment {
    long begin = 0;  // sample indices
    long end = 0;
    double seconds(int sample_rate) const {
        return static_cast<double>(end - begin) / sample_rate;
    }
};

// Cuts at sub-threshold RMS frames and keeps speech runs whose duration lies
// in [min_sec, max_sec]; longer unbroken runs are discarded.
std::vector<Segment> segment_silence(const std::vector<double>& waveform, double rms_threshold,
                                     double min_sec = 5.0, double max_sec = 20.0,
                                     int sample_rate = 16000);

void write_wav16(const std::filesystem::path& path, const std::vector<double>& samples,
                 int sample_rate);
std::vector<double> read_wav16(const std::filesystem::path& path, int* sample_rate = nullptr);

}  // namespace lorp::audio
