#include "safectrl/image_io.hpp"

#include <cmath>
#include <fstream>
#include <string>

namespace safectrl {

namespace {

unsigned char to_byte(float v) {
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<unsigned char>(std::lround(c * 255.0f));
}

void write_netpbm(const std::string& path, const char* magic, int w, int h,
                  const std::string& pixels) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(path + ": cannot open for writing");
    out << magic << "\n" << w << " " << h << "\n255\n";
    out.write(pixels.data(), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw IoError(path + ": write failed");
}

struct PnmReader {
    std::string bytes;
    size_t pos = 0;
    std::string path;

    explicit PnmReader(const std::string& p) : path(p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw IoError(p + ": cannot open");
        bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    // skip whitespace and # comments between header tokens
    void skip_space() {
        while (pos < bytes.size()) {
            const char c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }
    int read_int() {
        skip_space();
        if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9')
            throw IoError(path + ": malformed header");
        long v = 0;
        while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1 << 24) throw IoError(path + ": implausible header value");
            ++pos;
        }
        return static_cast<int>(v);
    }
    const unsigned char* payload(const char* magic, int* w, int* h) {
        skip_space();
        if (pos + 2 > bytes.size() || bytes[pos] != magic[0] || bytes[pos + 1] != magic[1])
            throw IoError(path + ": not a " + magic + std::string(" file"));
        pos += 2;
        *w = read_int();
        *h = read_int();
        const int maxval = read_int();
        if (maxval != 255) throw IoError(path + ": only maxval 255 supported");
        ++pos;  // the single whitespace byte before binary data
        const size_t need = static_cast<size_t>(*w) * static_cast<size_t>(*h) *
                            (magic[1] == '6' ? 3u : 1u);
        if (pos + need > bytes.size()) throw IoError(path + ": truncated pixel data");
        return reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    }
};

}  // namespace

void write_ppm(const std::string& path, const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("write_ppm: need [3,H,W]");
    const int h = img.dim(1), w = img.dim(2);
    std::string pixels(static_cast<size_t>(3) * h * w, '\0');
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                pixels[(static_cast<size_t>(y) * w + x) * 3 + ch] =
                    static_cast<char>(to_byte(img.data()[(ch * h + y) * w + x]));
    write_netpbm(path, "P6", w, h, pixels);
}

Tensor read_ppm(const std::string& path) {
    PnmReader r(path);
    int w = 0, h = 0;
    const unsigned char* p = r.payload("P6", &w, &h);
    std::vector<float> data(static_cast<size_t>(3) * h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                data[(ch * h + y) * w + x] =
                    static_cast<float>(p[(static_cast<size_t>(y) * w + x) * 3 + ch]) / 255.0f;
    return Tensor::from_data({3, h, w}, std::move(data));
}

void write_pgm(const std::string& path, const Tensor& mask) {
    if (mask.rank() != 2) throw ShapeError("write_pgm: need [H,W]");
    const int h = mask.dim(0), w = mask.dim(1);
    std::string pixels(static_cast<size_t>(h) * w, '\0');
    for (int i = 0; i < h * w; ++i)
        pixels[static_cast<size_t>(i)] = static_cast<char>(to_byte(mask.data()[static_cast<size_t>(i)]));
    write_netpbm(path, "P5", w, h, pixels);
}

Tensor read_pgm(const std::string& path) {
    PnmReader r(path);
    int w = 0, h = 0;
    const unsigned char* p = r.payload("P5", &w, &h);
    std::vector<float> data(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(p[i]) / 255.0f;
    return Tensor::from_data({h, w}, std::move(data));
}

Tensor quantize_unit(const Tensor& t) {
    std::vector<float> data(t.data().size());
    for (size_t i = 0; i < data.size(); ++i)
        data[i] = static_cast<float>(to_byte(t.data()[i])) / 255.0f;
    return Tensor::from_data(t.shape(), std::move(data));
}

}  // namespace safectrl
