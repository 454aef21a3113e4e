#pragma once

// Corpus ingestion, geometric augmentation, source-keyed splitting and
// minibatch emission.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "crackseg/error.hpp"
#include "crackseg/image_io.hpp"
#include "crackseg/mask.hpp"
#include "crackseg/rng.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

struct Sample {
    Tensor<float> image;  // H x W x C
    LabelMask mask;
    std::string source_id;
};

struct AugmentSpec {
    double rotation_deg = 30.0;   // angle drawn from [-r, r]
    double shear_deg = 15.0;      // horizontal shear angle drawn from [-s, s]
    bool reflect_horizontal = true;
    bool reflect_vertical = true;
    /// Copies per original, the original included (1 disables augmentation).
    std::size_t multiplier = 2;

    void validate() const {
        if (!(rotation_deg >= 0.0) || !(shear_deg >= 0.0)) throw ConfigError("augment: ranges must be nonnegative");
        if (shear_deg >= 90.0) throw ConfigError("augment: shear must be below 90 degrees");
        if (multiplier < 1) throw ConfigError("augment: multiplier must be >= 1");
    }

    static AugmentSpec none() { return {0.0, 0.0, false, false, 1}; }
};

// ---------------------------------------------------------------- resizing

/// Bilinear resize with pixel-center alignment.
inline Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
    const std::size_t H = img.height(), W = img.width(), C = img.channels();
    if (H == out_h && W == out_w) return img;
    Tensor<float> out({out_h, out_w, C});
    const double sy = static_cast<double>(H) / static_cast<double>(out_h);
    const double sx = static_cast<double>(W) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < C; ++c) {
                const double v = (1 - wy) * ((1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c)) +
                                 wy * ((1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c));
                out.at(y, x, c) = static_cast<float>(v);
            }
        }
    }
    return out;
}

inline LabelMask resize_nearest(const LabelMask& m, std::size_t out_h, std::size_t out_w) {
    if (m.height == out_h && m.width == out_w) return m;
    LabelMask out(out_w, out_h);
    for (std::size_t y = 0; y < out_h; ++y) {
        const auto sy = std::min(static_cast<std::size_t>((static_cast<double>(y) + 0.5) * static_cast<double>(m.height) /
                                                          static_cast<double>(out_h)),
                                 m.height - 1);
        for (std::size_t x = 0; x < out_w; ++x) {
            const auto sx = std::min(static_cast<std::size_t>((static_cast<double>(x) + 0.5) * static_cast<double>(m.width) /
                                                              static_cast<double>(out_w)),
                                     m.width - 1);
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

namespace detail {

/// Dimensions after scaling the shortest side to `size`.
inline std::pair<std::size_t, std::size_t> shortest_side_dims(std::size_t h, std::size_t w, std::size_t size) {
    if (h <= w) return {size, std::max<std::size_t>(size, static_cast<std::size_t>(std::lround(static_cast<double>(w) * size / h)))};
    return {std::max<std::size_t>(size, static_cast<std::size_t>(std::lround(static_cast<double>(h) * size / w))), size};
}

}  // namespace detail

/// Shortest-side resize to `size` followed by a centered size x size crop.
inline Tensor<float> standardize_image(const Tensor<float>& img, std::size_t size) {
    const auto [rh, rw] = detail::shortest_side_dims(img.height(), img.width(), size);
    const Tensor<float> r = resize_bilinear(img, rh, rw);
    if (rh == size && rw == size) return r;
    const std::size_t oy = (rh - size) / 2, ox = (rw - size) / 2, C = r.channels();
    Tensor<float> out({size, size, C});
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
            for (std::size_t c = 0; c < C; ++c) out.at(y, x, c) = r.at(y + oy, x + ox, c);
    return out;
}

inline LabelMask standardize_mask(const LabelMask& m, std::size_t size) {
    const auto [rh, rw] = detail::shortest_side_dims(m.height, m.width, size);
    const LabelMask r = resize_nearest(m, rh, rw);
    if (rh == size && rw == size) return r;
    const std::size_t oy = (rh - size) / 2, ox = (rw - size) / 2;
    LabelMask out(size, size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) out.at(y, x) = r.at(y + oy, x + ox);
    return out;
}

// ---------------------------------------------------------------- ingestion

inline bool is_image_file(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Regular files in `dir` accepted by `keep`, sorted by filename.
template <typename Pred>
std::vector<fs::path> list_files(const fs::path& dir, Pred keep) {
    if (!fs::is_directory(dir)) throw IngestionError(dir.string() + ": directory not found");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && keep(e.path())) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

/// Loads `image_dir/<name>.(png|jpg|jpeg)` with `mask_dir/<name>.png`, standardized to
/// input_size x input_size. Images are in [0, 1] and not yet mean-centered.
inline std::vector<Sample> load_corpus(const fs::path& image_dir, const fs::path& mask_dir, std::size_t input_size = 256,
                                       std::size_t num_classes = 3) {
    if (!fs::is_directory(mask_dir)) throw IngestionError(mask_dir.string() + ": mask directory not found");
    const auto images = list_files(image_dir, is_image_file);
    std::vector<Sample> out;
    std::set<std::string> seen;
    for (const auto& ip : images) {
        const std::string stem = ip.stem().string();
        if (!seen.insert(stem).second) throw IngestionError(ip.string() + ": duplicate image name '" + stem + "'");
        const fs::path mp = mask_dir / (stem + ".png");
        if (!fs::exists(mp)) throw IngestionError(ip.string() + ": missing mask " + mp.string());
        Tensor<float> img = read_rgb(ip);
        LabelMask mask = read_mask(mp, num_classes);
        if (mask.width != img.width() || mask.height != img.height())
            throw IngestionError(mp.string() + ": mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                                 " but image is " + std::to_string(img.width()) + "x" + std::to_string(img.height()));
        out.push_back({standardize_image(img, input_size), standardize_mask(mask, input_size), stem});
    }
    return out;
}

/// Per-channel mean over every pixel of every sample.
inline std::vector<double> channel_means(const std::vector<Sample>& samples) {
    if (samples.empty()) return {};
    const std::size_t C = samples.front().image.channels();
    std::vector<double> sum(C, 0.0);
    double count = 0.0;
    for (const auto& s : samples) {
        const std::size_t px = s.image.size() / C;
        for (std::size_t i = 0; i < px; ++i)
            for (std::size_t c = 0; c < C; ++c) sum[c] += s.image[i * C + c];
        count += static_cast<double>(px);
    }
    for (auto& v : sum) v /= count;
    return sum;
}

/// Zero-center: subtracts `means` channel-wise.
inline void normalize(std::vector<Sample>& samples, const std::vector<double>& means) {
    for (auto& s : samples) {
        const std::size_t C = s.image.channels();
        if (C != means.size()) throw RejectedInput("normalize: channel count does not match means");
        for (std::size_t i = 0; i < s.image.size(); ++i)
            s.image[i] = static_cast<float>(static_cast<double>(s.image[i]) - means[i % C]);
    }
}

inline Tensor<float> normalized(Tensor<float> img, const std::vector<double>& means) {
    const std::size_t C = img.channels();
    if (C != means.size()) throw RejectedInput("normalize: channel count does not match means");
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(static_cast<double>(img[i]) - means[i % C]);
    return img;
}

// ---------------------------------------------------------------- augmentation

/// One concrete draw: reflect, then shear, then rotate, about the image center.
struct AffineTransform {
    double rotation_deg = 0.0;
    double shear_deg = 0.0;
    bool flip_horizontal = false;
    bool flip_vertical = false;

    /// Forward 2x2 matrix acting on (x, y) offsets from the center.
    std::array<double, 4> matrix() const {
        const double th = rotation_deg * std::numbers::pi / 180.0;
        const double sh = std::tan(shear_deg * std::numbers::pi / 180.0);
        const double fx = flip_horizontal ? -1.0 : 1.0, fy = flip_vertical ? -1.0 : 1.0;
        const double c = std::cos(th), s = std::sin(th);
        // R * S * F with S = [[1, sh], [0, 1]], F = diag(fx, fy)
        return {c * fx, (c * sh - s) * fy, s * fx, (s * sh + c) * fy};
    }

    /// Maps an input pixel (col, row) to its output location.
    std::pair<double, double> map(double col, double row, std::size_t width, std::size_t height) const {
        const auto m = matrix();
        const double cx = (static_cast<double>(width) - 1) / 2, cy = (static_cast<double>(height) - 1) / 2;
        const double dx = col - cx, dy = row - cy;
        return {cx + m[0] * dx + m[1] * dy, cy + m[2] * dx + m[3] * dy};
    }
};

inline AffineTransform draw_transform(const AugmentSpec& spec, Rng& rng) {
    AffineTransform t;
    t.rotation_deg = uniform(rng, -spec.rotation_deg, spec.rotation_deg);
    t.shear_deg = uniform(rng, -spec.shear_deg, spec.shear_deg);
    t.flip_horizontal = spec.reflect_horizontal && uniform01(rng) < 0.5;
    t.flip_vertical = spec.reflect_vertical && uniform01(rng) < 0.5;
    return t;
}

/// Applies `t` by inverse mapping: bilinear for the image, nearest for the mask.
/// Out-of-frame pixels take the image's channel means and the Background class.
inline Sample apply_transform(const Sample& in, const AffineTransform& t) {
    const std::size_t H = in.image.height(), W = in.image.width(), C = in.image.channels();
    const auto m = t.matrix();
    const double det = m[0] * m[3] - m[1] * m[2];
    const std::array<double, 4> inv{m[3] / det, -m[1] / det, -m[2] / det, m[0] / det};
    const double cx = (static_cast<double>(W) - 1) / 2, cy = (static_cast<double>(H) - 1) / 2;

    std::vector<double> fill(C, 0.0);
    for (std::size_t i = 0; i < in.image.size(); ++i) fill[i % C] += in.image[i];
    for (auto& f : fill) f /= static_cast<double>(H * W);

    Sample out{Tensor<float>({H, W, C}), LabelMask(W, H), in.source_id};
    const double maxx = static_cast<double>(W - 1), maxy = static_cast<double>(H - 1);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            const double u = cx + inv[0] * dx + inv[1] * dy;
            const double v = cy + inv[2] * dx + inv[3] * dy;

            const double ru = std::round(u), rv = std::round(v);
            if (ru >= 0 && rv >= 0 && ru <= maxx && rv <= maxy)
                out.mask.at(y, x) = in.mask.at(static_cast<std::size_t>(rv), static_cast<std::size_t>(ru));

            if (u < -1e-9 || v < -1e-9 || u > maxx + 1e-9 || v > maxy + 1e-9) {
                for (std::size_t c = 0; c < C; ++c) out.image.at(y, x, c) = static_cast<float>(fill[c]);
                continue;
            }
            const double cu = std::clamp(u, 0.0, maxx), cv = std::clamp(v, 0.0, maxy);
            const auto x0 = static_cast<std::size_t>(cu), y0 = static_cast<std::size_t>(cv);
            const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
            const double wx = cu - static_cast<double>(x0), wy = cv - static_cast<double>(y0);
            for (std::size_t c = 0; c < C; ++c) {
                const double val = (1 - wy) * ((1 - wx) * in.image.at(y0, x0, c) + wx * in.image.at(y0, x1, c)) +
                                   wy * ((1 - wx) * in.image.at(y1, x0, c) + wx * in.image.at(y1, x1, c));
                out.image.at(y, x, c) = static_cast<float>(val);
            }
        }
    return out;
}

inline Sample augment(const Sample& s, const AugmentSpec& spec, Rng& rng) {
    spec.validate();
    return apply_transform(s, draw_transform(spec, rng));
}

/// Each original followed by multiplier-1 augmented copies; copy j of sample i
/// draws from a stream seeded by (seed, i, j).
inline std::vector<Sample> augment_corpus(const std::vector<Sample>& samples, const AugmentSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::vector<Sample> out;
    out.reserve(samples.size() * spec.multiplier);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        out.push_back(samples[i]);
        for (std::size_t j = 1; j < spec.multiplier; ++j) {
            Rng rng(mix_seed(seed, i, j));
            out.push_back(augment(samples[i], spec, rng));
        }
    }
    return out;
}

// ---------------------------------------------------------------- split / batches

struct Split {
    std::vector<Sample> train;
    std::vector<Sample> validation;
};

/// Partitions by source_id: round(fraction * sources) sources go to training.
/// Samples sharing a source never straddle the split.
inline Split split(const std::vector<Sample>& samples, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
    if (samples.empty()) throw IngestionError("split: empty corpus");
    std::vector<std::string> sources;
    for (const auto& s : samples) sources.push_back(s.source_id);
    std::sort(sources.begin(), sources.end());
    sources.erase(std::unique(sources.begin(), sources.end()), sources.end());

    Rng rng(mix_seed(seed, 0x5117));
    const auto perm = permutation(sources.size(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(sources.size())));
    if (sources.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, sources.size() - 1);
    std::set<std::string> train_sources;
    for (std::size_t i = 0; i < n_train; ++i) train_sources.insert(sources[perm[i]]);

    Split out;
    for (const auto& s : samples) (train_sources.count(s.source_id) ? out.train : out.validation).push_back(s);
    return out;
}

/// Epoch-dependent shuffled index groups; the final short group is kept.
inline std::vector<std::vector<std::size_t>> minibatch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                               std::uint64_t epoch) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    Rng rng(mix_seed(seed, 0xba7c4, epoch));
    const auto perm = permutation(n, rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size)
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                         perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    return out;
}

struct Batch {
    Tensor<float> images;  // N x H x W x C
    Tensor<float> labels;  // N x H x W x K one-hot
    std::vector<std::size_t> indices;
};

inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices,
                        std::size_t num_classes) {
    if (indices.empty()) throw RejectedInput("make_batch: empty batch");
    const auto& first = samples.at(indices.front()).image;
    const std::size_t H = first.height(), W = first.width(), C = first.channels();
    Batch b{Tensor<float>({indices.size(), H, W, C}), Tensor<float>({indices.size(), H, W, num_classes}), indices};
    for (std::size_t n = 0; n < indices.size(); ++n) {
        const auto& s = samples.at(indices[n]);
        if (s.image.shape() != first.shape() || s.mask.width != W || s.mask.height != H)
            throw RejectedInput("make_batch: sample '" + s.source_id + "' has a different size");
        std::copy(s.image.values().begin(), s.image.values().end(), b.images.data() + n * H * W * C);
        const auto oh = one_hot<float>(s.mask, num_classes);
        std::copy(oh.values().begin(), oh.values().end(), b.labels.data() + n * H * W * num_classes);
    }
    return b;
}

inline std::vector<Batch> minibatches(const std::vector<Sample>& samples, std::size_t batch_size, std::uint64_t seed,
                                      std::uint64_t epoch, std::size_t num_classes = 3) {
    std::vector<Batch> out;
    for (const auto& idx : minibatch_indices(samples.size(), batch_size, seed, epoch))
        out.push_back(make_batch(samples, idx, num_classes));
    return out;
}

/// Per-class pixel counts and, per class, the total pixels of the masks that contain it.
struct PixelStats {
    std::vector<std::uint64_t> counts;
    std::vector<std::uint64_t> presence_totals;
    std::uint64_t total = 0;
};

inline void accumulate_stats(PixelStats& st, const LabelMask& m, std::size_t num_classes) {
    if (st.counts.empty()) {
        st.counts.assign(num_classes, 0);
        st.presence_totals.assign(num_classes, 0);
    }
    std::vector<std::uint64_t> local(num_classes, 0);
    for (auto v : m.classes) {
        if (v >= num_classes) throw IngestionError("mask value " + std::to_string(v) + " out of range");
        ++local[v];
    }
    for (std::size_t k = 0; k < num_classes; ++k) {
        st.counts[k] += local[k];
        if (local[k] > 0) st.presence_totals[k] += m.size();
    }
    st.total += m.size();
}

inline PixelStats pixel_stats(const std::vector<Sample>& samples, std::size_t num_classes) {
    PixelStats st;
    st.counts.assign(num_classes, 0);
    st.presence_totals.assign(num_classes, 0);
    for (const auto& s : samples) accumulate_stats(st, s.mask, num_classes);
    return st;
}

}  // namespace crackseg
