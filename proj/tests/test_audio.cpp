#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <filesystem>
#include <vector>

#include "koshur/audio.hpp"
#include "koshur/dsp.hpp"

using namespace koshur;
using namespace koshur::audio;

namespace {

const double kTau = 2.0 * 3.14159265358979323846;

AudioBuffer sine(double freq, int rate, double seconds, double amp = 1.0) {
    AudioBuffer b;
    b.sample_rate = rate;
    std::size_t n = static_cast<std::size_t>(seconds * rate);
    b.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) b.samples[i] = amp * std::sin(kTau * freq * i / rate);
    return b;
}

std::filesystem::path tmp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "koshur_audio_test";
    std::filesystem::create_directories(dir);
    return dir;
}

// Dominant frequency via zero-padded FFT peak.
double dominant_hz(const AudioBuffer& b) {
    std::size_t n = 65536;
    std::vector<std::complex<double>> a(n, 0.0);
    for (std::size_t i = 0; i < std::min(b.samples.size(), n); ++i) a[i] = b.samples[i];
    dsp::fft_inplace(a, false);
    std::size_t best = 1;
    for (std::size_t k = 1; k < n / 2; ++k)
        if (std::abs(a[k]) > std::abs(a[best])) best = k;
    return static_cast<double>(best) * b.sample_rate / n;
}

double rms(const AudioBuffer& b) {
    double acc = 0.0;
    for (double s : b.samples) acc += s * s;
    return b.samples.empty() ? 0.0 : std::sqrt(acc / b.samples.size());
}

}  // namespace

TEST_CASE("PCM16 write/read round-trips within one quantization step") {
    auto path = tmp_dir() / "sine440.wav";
    AudioBuffer in = sine(440.0, 22050, 1.0);
    write_wav(path, in);
    AudioBuffer out = read_wav(path);
    REQUIRE(out.sample_rate == 22050);
    REQUIRE(out.samples.size() == in.samples.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < in.samples.size(); ++i)
        worst = std::max(worst, std::abs(in.samples[i] - out.samples[i]));
    CHECK(worst <= std::pow(2.0, -15.0));
}

TEST_CASE("zero-length audio round-trips to a zero-length buffer") {
    auto path = tmp_dir() / "empty.wav";
    AudioBuffer in;
    in.sample_rate = 22050;
    write_wav(path, in);
    AudioBuffer out = read_wav(path);
    CHECK(out.samples.empty());
    CHECK(out.sample_rate == 22050);
}

TEST_CASE("stereo files yield the left channel at full length") {
    // hand-build a 4-frame stereo PCM16 file: left ramp, right constant
    auto path = tmp_dir() / "stereo.wav";
    std::ofstream out(path, std::ios::binary);
    std::vector<std::int16_t> frames = {1000, -1, 2000, -1, 3000, -1, 4000, -1};
    std::uint32_t data_len = static_cast<std::uint32_t>(frames.size() * 2);
    out.write("RIFF", 4);
    write_u32le(out, 36 + data_len);
    out.write("WAVEfmt ", 8);
    write_u32le(out, 16);
    std::uint8_t fmt[16] = {1, 0, 2, 0};  // PCM, stereo
    std::uint32_t rate = 8000, byte_rate = 8000 * 4;
    std::memcpy(fmt + 4, &rate, 4);
    std::memcpy(fmt + 8, &byte_rate, 4);
    fmt[12] = 4; fmt[13] = 0; fmt[14] = 16; fmt[15] = 0;
    out.write(reinterpret_cast<const char*>(fmt), 16);
    out.write("data", 4);
    write_u32le(out, data_len);
    out.write(reinterpret_cast<const char*>(frames.data()), data_len);
    out.close();

    AudioBuffer b = read_wav(path);
    REQUIRE(b.samples.size() == 4);
    CHECK(b.samples[0] == Catch::Approx(1000 / 32768.0));
    CHECK(b.samples[3] == Catch::Approx(4000 / 32768.0));
}

TEST_CASE("float32 WAV data is read as-is") {
    auto path = tmp_dir() / "f32.wav";
    std::ofstream out(path, std::ios::binary);
    std::vector<float> samples = {0.25f, -0.5f, 0.125f};
    std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * 4);
    out.write("RIFF", 4);
    write_u32le(out, 36 + data_len);
    out.write("WAVEfmt ", 8);
    write_u32le(out, 16);
    std::uint8_t fmt[16] = {3, 0, 1, 0};  // IEEE float, mono
    std::uint32_t rate = 16000, byte_rate = 16000 * 4;
    std::memcpy(fmt + 4, &rate, 4);
    std::memcpy(fmt + 8, &byte_rate, 4);
    fmt[12] = 4; fmt[13] = 0; fmt[14] = 32; fmt[15] = 0;
    out.write(reinterpret_cast<const char*>(fmt), 16);
    out.write("data", 4);
    write_u32le(out, data_len);
    out.write(reinterpret_cast<const char*>(samples.data()), data_len);
    out.close();

    AudioBuffer b = read_wav(path);
    REQUIRE(b.samples.size() == 3);
    CHECK(b.samples[0] == 0.25);
    CHECK(b.samples[1] == -0.5);
    CHECK(b.sample_rate == 16000);
}

TEST_CASE("malformed WAV headers are rejected") {
    auto dir = tmp_dir();
    write_text_file(dir / "junk.wav", "definitely not a riff file");
    CHECK_THROWS_AS(read_wav(dir / "junk.wav"), CorruptHeader);

    // valid RIFF shell, unsupported 8-bit format
    auto path = dir / "pcm8.wav";
    std::ofstream out(path, std::ios::binary);
    out.write("RIFF", 4);
    write_u32le(out, 36);
    out.write("WAVEfmt ", 8);
    write_u32le(out, 16);
    std::uint8_t fmt[16] = {1, 0, 1, 0};
    std::uint32_t rate = 8000, byte_rate = 8000;
    std::memcpy(fmt + 4, &rate, 4);
    std::memcpy(fmt + 8, &byte_rate, 4);
    fmt[12] = 1; fmt[13] = 0; fmt[14] = 8; fmt[15] = 0;
    out.write(reinterpret_cast<const char*>(fmt), 16);
    out.write("data", 4);
    write_u32le(out, 0);
    out.close();
    CHECK_THROWS_AS(read_wav(path), UnsupportedFormat);
}

TEST_CASE("resample at the same rate is the identity") {
    AudioBuffer in = sine(440.0, 22050, 0.25);
    AudioBuffer out = resample(in, 22050);
    REQUIRE(out.samples.size() == in.samples.size());
    CHECK(out.samples == in.samples);
}

TEST_CASE("resample 44.1k -> 22.05k keeps a 1 kHz tone at 1 kHz") {
    AudioBuffer in = sine(1000.0, 44100, 0.5);
    AudioBuffer out = resample(in, 22050);
    std::size_t expect = static_cast<std::size_t>(
        std::llround(in.samples.size() * 22050.0 / 44100.0));
    CHECK(out.samples.size() == expect);
    CHECK(std::abs(dominant_hz(out) - 1000.0) < 1.0);

    // passband amplitude within 0.5 dB (compare interior RMS)
    AudioBuffer mid_in{std::vector<double>(in.samples.begin() + 4000, in.samples.end() - 4000), 44100};
    AudioBuffer mid_out{std::vector<double>(out.samples.begin() + 2000, out.samples.end() - 2000), 22050};
    double db = 20.0 * std::log10(rms(mid_out) / rms(mid_in));
    CHECK(std::abs(db) < 0.5);
}

TEST_CASE("resample upsamples with the documented output length") {
    AudioBuffer in = sine(440.0, 16000, 0.1);
    AudioBuffer out = resample(in, 22050);
    long expect = std::lround(in.samples.size() * 22050.0 / 16000.0);
    CHECK(std::llabs(static_cast<long>(out.samples.size()) - expect) <= 1);
    CHECK(std::abs(dominant_hz(out) - 440.0) < 2.0);
}

TEST_CASE("resample preserves DC level") {
    AudioBuffer in;
    in.sample_rate = 44100;
    in.samples.assign(8000, 0.5);
    AudioBuffer out = resample(in, 22050);
    for (std::size_t i = 100; i + 100 < out.samples.size(); ++i)
        REQUIRE(out.samples[i] == Catch::Approx(0.5).margin(1e-3));
}
