#include "rrl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace rrl {

namespace {

constexpr double kTau = 6.283185307179586477;

void box_blur(std::vector<double>& f, int size, int radius) {
    std::vector<double> tmp(f.size());
    // horizontal then vertical pass
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double acc = 0;
            int cnt = 0;
            for (int d = -radius; d <= radius; ++d) {
                int xx = x + d;
                if (xx >= 0 && xx < size) {
                    acc += f[static_cast<size_t>(y) * size + xx];
                    ++cnt;
                }
            }
            tmp[static_cast<size_t>(y) * size + x] = acc / cnt;
        }
    }
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double acc = 0;
            int cnt = 0;
            for (int d = -radius; d <= radius; ++d) {
                int yy = y + d;
                if (yy >= 0 && yy < size) {
                    acc += tmp[static_cast<size_t>(yy) * size + x];
                    ++cnt;
                }
            }
            f[static_cast<size_t>(y) * size + x] = acc / cnt;
        }
    }
}

// latent scene: sinusoids + blurred noise + a few filled shapes, normalized
std::vector<double> make_scene(Rng& rng, int size) {
    std::vector<double> f(static_cast<size_t>(size) * size, 0.0);
    const int waves = 3 + static_cast<int>(rng.below(4));
    for (int k = 0; k < waves; ++k) {
        const double fx = rng.uniform(-6.0, 6.0);
        const double fy = rng.uniform(-6.0, 6.0);
        const double phase = rng.uniform(0.0, kTau);
        const double amp = rng.uniform(0.4, 1.0);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                f[static_cast<size_t>(y) * size + x] +=
                    amp * std::sin(kTau * (fx * x + fy * y) / size + phase);
    }

    std::vector<double> noise(f.size());
    for (auto& v : noise) v = rng.uniform(-1.0, 1.0);
    box_blur(noise, size, 2);
    box_blur(noise, size, 2);
    for (size_t i = 0; i < f.size(); ++i) f[i] += 1.2 * noise[i];

    const int shapes = 1 + static_cast<int>(rng.below(3));
    for (int s = 0; s < shapes; ++s) {
        const double intensity = rng.uniform(0.6, 1.6) * (rng.below(2) ? 1.0 : -1.0);
        if (rng.below(2)) {
            const double cx = rng.uniform(size * 0.15, size * 0.85);
            const double cy = rng.uniform(size * 0.15, size * 0.85);
            const double rx = rng.uniform(size * 0.06, size * 0.25);
            const double ry = rng.uniform(size * 0.06, size * 0.25);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
                    if (dx * dx + dy * dy <= 1.0) f[static_cast<size_t>(y) * size + x] += intensity;
                }
        } else {
            double px[3], py[3];
            for (int v = 0; v < 3; ++v) {
                px[v] = rng.uniform(0.0, size - 1.0);
                py[v] = rng.uniform(0.0, size - 1.0);
            }
            auto edge = [](double ax, double ay, double bx, double by, double x, double y) {
                return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            };
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double e0 = edge(px[0], py[0], px[1], py[1], x, y);
                    const double e1 = edge(px[1], py[1], px[2], py[2], x, y);
                    const double e2 = edge(px[2], py[2], px[0], py[0], x, y);
                    if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0))
                        f[static_cast<size_t>(y) * size + x] += intensity;
                }
        }
    }

    double mn = f[0], mx = f[0];
    for (double v : f) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx - mn < 1e-9) {
        std::fill(f.begin(), f.end(), 0.5);
    } else {
        for (auto& v : f) v = (v - mn) / (mx - mn);
    }
    return f;
}

float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

// spectral-A: gamma curve + additive noise
std::vector<float> render_a(const std::vector<double>& scene, Rng& rng, int size) {
    const double gamma = rng.uniform(0.7, 1.4);
    std::vector<float> out(scene.size());
    for (size_t i = 0; i < scene.size(); ++i)
        out[i] = clamp01(std::pow(scene[i], gamma) + rng.normal() * 0.02);
    (void)size;
    return out;
}

// spectral-B: inverse-gamma brightening + contrast compression + light blur +
// independent noise; monotone in the scene intensity but pixelwise nonlinear
// relative to the A rendering
std::vector<float> render_b(const std::vector<double>& scene, Rng& rng, int size) {
    const double gamma = rng.uniform(1.5, 2.5);
    const double compress = rng.uniform(0.55, 0.8);
    std::vector<double> v(scene.size());
    for (size_t i = 0; i < scene.size(); ++i) {
        const double g = std::pow(scene[i], 1.0 / gamma);
        v[i] = 0.5 + compress * (g - 0.5);
    }
    // 3x3 binomial blur
    std::vector<double> blurred(v.size());
    static const double kk[3] = {0.25, 0.5, 0.25};
    std::vector<double> tmp(v.size());
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double acc = 0, wsum = 0;
            for (int d = -1; d <= 1; ++d) {
                int xx = x + d;
                if (xx >= 0 && xx < size) {
                    acc += kk[d + 1] * v[static_cast<size_t>(y) * size + xx];
                    wsum += kk[d + 1];
                }
            }
            tmp[static_cast<size_t>(y) * size + x] = acc / wsum;
        }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double acc = 0, wsum = 0;
            for (int d = -1; d <= 1; ++d) {
                int yy = y + d;
                if (yy >= 0 && yy < size) {
                    acc += kk[d + 1] * tmp[static_cast<size_t>(yy) * size + x];
                    wsum += kk[d + 1];
                }
            }
            blurred[static_cast<size_t>(y) * size + x] = acc / wsum;
        }
    std::vector<float> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = clamp01(blurred[i] + rng.normal() * 0.03);
    return out;
}

}  // namespace

std::vector<PatchPair> generate_pairs(uint64_t seed, int n, int size) {
    if (n < 0 || n % 2 != 0) throw ConfigError("generate_pairs: pair count must be even, got " + std::to_string(n));
    if (size < 1) throw ConfigError("generate_pairs: bad patch size");
    std::vector<PatchPair> pairs(static_cast<size_t>(n));
    parallel_for(n, 16, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
            PatchPair& p = pairs[static_cast<size_t>(i)];
            p.size = size;
            p.label = (i % 2 == 0) ? 1 : 0;
            if (p.label == 1) {
                auto scene = make_scene(rng, size);
                p.a = render_a(scene, rng, size);
                p.b = render_b(scene, rng, size);
            } else {
                auto scene1 = make_scene(rng, size);
                auto scene2 = make_scene(rng, size);
                p.a = render_a(scene1, rng, size);
                p.b = render_b(scene2, rng, size);
            }
        }
    });
    return pairs;
}

std::vector<float> apply_geom(const std::vector<float>& pix, int size, int g) {
    std::vector<float> out(pix.size());
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            int sx = x, sy = y;
            switch (g) {
                case 0: break;
                case 1: sx = size - 1 - x; break;                      // horizontal flip
                case 2: sy = size - 1 - y; break;                      // vertical flip
                case 3: sx = y; sy = size - 1 - x; break;              // rotate 90
                case 4: sx = size - 1 - x; sy = size - 1 - y; break;   // rotate 180
                case 5: sx = size - 1 - y; sy = x; break;              // rotate 270
                default: throw ConfigError("apply_geom: bad transform code");
            }
            out[static_cast<size_t>(y) * size + x] = pix[static_cast<size_t>(sy) * size + sx];
        }
    }
    return out;
}

int inverse_geom(int g) {
    switch (g) {
        case 3: return 5;
        case 5: return 3;
        default: return g;  // identity, flips and rot180 are involutions
    }
}

namespace {

std::vector<float> contrast(const std::vector<float>& pix, double c) {
    double mean = 0;
    for (float v : pix) mean += v;
    mean /= static_cast<double>(pix.size());
    std::vector<float> out(pix.size());
    for (size_t i = 0; i < pix.size(); ++i)
        out[i] = static_cast<float>(std::min(1.0, std::max(0.0, mean + c * (pix[i] - mean))));
    return out;
}

}  // namespace

PatchPair augment(const PatchPair& p, uint64_t seed) {
    Rng rng(seed);
    const int g = static_cast<int>(rng.below(6));
    const double ca = rng.uniform(0.8, 1.2);
    const double cb = rng.uniform(0.8, 1.2);
    PatchPair out;
    out.size = p.size;
    out.label = p.label;
    out.a = contrast(apply_geom(p.a, p.size, g), ca);
    out.b = contrast(apply_geom(p.b, p.size, g), cb);
    return out;
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm(const std::string& path, const std::vector<float>& pix, int w, int h) {
    if (static_cast<int64_t>(pix.size()) != static_cast<int64_t>(w) * h)
        throw IoError("write_pgm: pixel count does not match " + std::to_string(w) + "x" + std::to_string(h));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_pgm: cannot open " + path);
    out << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> bytes(pix.size());
    for (size_t i = 0; i < pix.size(); ++i) {
        const long v = std::lround(static_cast<double>(pix[i]) * 255.0);
        bytes[i] = static_cast<unsigned char>(std::min(255L, std::max(0L, v)));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write_pgm: write failed for " + path);
}

namespace {

int pgm_token(std::istream& in, const std::string& path) {
    // skips whitespace and '#' comments per the PGM grammar
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
        } else if (!std::isspace(c)) {
            break;
        }
    }
    if (c == EOF) throw DataError("read_pgm: truncated header in " + path);
    int value = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw DataError("read_pgm: malformed header in " + path);
    return value;
}

}  // namespace

std::vector<float> read_pgm(const std::string& path, int& w, int& h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("read_pgm: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '5') throw DataError("read_pgm: not a binary PGM: " + path);
    w = pgm_token(in, path);
    h = pgm_token(in, path);
    const int maxval = pgm_token(in, path);
    if (w < 1 || h < 1 || maxval < 1 || maxval > 255)
        throw DataError("read_pgm: unsupported dimensions or maxval in " + path);
    std::vector<unsigned char> bytes(static_cast<size_t>(w) * h);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw DataError("read_pgm: truncated pixel data in " + path);
    std::vector<float> pix(bytes.size());
    for (size_t i = 0; i < bytes.size(); ++i) pix[i] = static_cast<float>(bytes[i]) / static_cast<float>(maxval);
    return pix;
}

// ---------------------------------------------------------------------------
// dataset directory

DatasetIndex load_index(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path index_path = fs::path(dir) / "index.csv";
    std::ifstream in(index_path);
    if (!in) throw DataError("load_index: cannot open " + index_path.string());
    DatasetIndex idx;
    idx.root = dir;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != "path_a,path_b,label")
                throw DataError("load_index: bad header at line 1 of " + index_path.string());
            continue;
        }
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string pa, pb, lab;
        if (!std::getline(ss, pa, ',') || !std::getline(ss, pb, ',') || !std::getline(ss, lab)) {
            throw DataError("load_index: malformed row at line " + std::to_string(line_no) + " of " +
                            index_path.string());
        }
        if (lab != "0" && lab != "1")
            throw DataError("load_index: label '" + lab + "' not in {0,1} at line " + std::to_string(line_no) +
                            " of " + index_path.string());
        const int label = lab == "1" ? 1 : 0;
        (label ? idx.positives : idx.negatives)++;
        idx.records.push_back({pa, pb, label});
    }
    return idx;
}

PatchPair load_pair(const DatasetIndex& idx, size_t record, int expected_size) {
    if (record >= idx.records.size()) throw DataError("load_pair: record index out of range");
    namespace fs = std::filesystem;
    const auto& rec = idx.records[record];
    PatchPair p;
    p.size = expected_size;
    p.label = rec.label;
    const std::string row = " (index.csv record " + std::to_string(record + 1) + ")";
    for (int side = 0; side < 2; ++side) {
        const std::string& rel = side == 0 ? rec.path_a : rec.path_b;
        const std::string path = (fs::path(idx.root) / rel).string();
        int w = 0, h = 0;
        std::vector<float> pix;
        try {
            pix = read_pgm(path, w, h);
        } catch (const DataError& e) {
            throw DataError(std::string(e.what()) + row);
        }
        if (w != expected_size || h != expected_size)
            throw DataError("load_pair: " + path + " is " + std::to_string(w) + "x" + std::to_string(h) +
                            ", expected " + std::to_string(expected_size) + "x" + std::to_string(expected_size) +
                            row);
        (side == 0 ? p.a : p.b) = std::move(pix);
    }
    return p;
}

void write_dataset(const std::string& dir, const std::vector<PatchPair>& pairs) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(fs::path(dir) / "index.csv");
    if (!index) throw IoError("write_dataset: cannot open index.csv in " + dir);
    index << "path_a,path_b,label\n";
    char name[32];
    for (size_t i = 0; i < pairs.size(); ++i) {
        std::snprintf(name, sizeof(name), "p%06zu_a.pgm", i);
        const std::string na = name;
        std::snprintf(name, sizeof(name), "p%06zu_b.pgm", i);
        const std::string nb = name;
        write_pgm((fs::path(dir) / na).string(), pairs[i].a, pairs[i].size, pairs[i].size);
        write_pgm((fs::path(dir) / nb).string(), pairs[i].b, pairs[i].size, pairs[i].size);
        index << na << "," << nb << "," << pairs[i].label << "\n";
    }
    if (!index) throw IoError("write_dataset: index.csv write failed in " + dir);
}

}  // namespace rrl
