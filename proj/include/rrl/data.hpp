#pragma once
// Synthetic cross-spectral pairs, correspondence-preserving augmentation,
// PGM patch files and the index.csv dataset format.

#include <cstdint>
#include <string>
#include <vector>

#include "rrl/common.hpp"

namespace rrl {

struct PatchPair {
    int size = 64;
    std::vector<float> a, b;  // size*size pixels in [0,1], row-major
    int label = 0;            // 1 = same scene
};

// n/2 matching + n/2 non-matching pairs, fully determined by (seed, n, size).
// Each latent scene is a procedural texture (random sinusoids + blurred noise
// + random shapes, min-max normalized); the two spectral renderings apply
// different monotone nonlinear intensity maps plus independent noise, and the
// second adds a light blur. Matching pairs render one scene twice,
// non-matching pairs two independent scenes.
std::vector<PatchPair> generate_pairs(uint64_t seed, int n, int size = 64);

// Geometric transform codes drawn by augment: 0 identity, 1 hflip, 2 vflip,
// 3..5 rotation by 90/180/270 degrees.
std::vector<float> apply_geom(const std::vector<float>& pix, int size, int g);
int inverse_geom(int g);

// One seeded draw: a shared geometric transform (both patches, label intact)
// plus independent per-patch contrast scaling in [0.8, 1.2] around the mean.
PatchPair augment(const PatchPair& p, uint64_t seed);

// binary PGM (P5), maxval 255
void write_pgm(const std::string& path, const std::vector<float>& pix, int w, int h);
std::vector<float> read_pgm(const std::string& path, int& w, int& h);

struct DatasetIndex {
    std::string root;
    struct Record {
        std::string path_a, path_b;
        int label;
    };
    std::vector<Record> records;
    int positives = 0, negatives = 0;
};

// Parses and validates dir/index.csv (header path_a,path_b,label). Malformed
// rows are rejected with the offending line number.
DatasetIndex load_index(const std::string& dir);

// Reads one record's patch files; errors name the record.
PatchPair load_pair(const DatasetIndex& idx, size_t record, int expected_size = 64);

void write_dataset(const std::string& dir, const std::vector<PatchPair>& pairs);

}  // namespace rrl
