#pragma once

#include "canopy/raster.hpp"

#include <cmath>
#include <vector>

namespace oracles {

struct Texture {
    bool defined = false;
    bool cor_defined = false;
    double hom = 0.0, con = 0.0, cor = 0.0;
};

/// Builds each orientation's full symmetric co-occurrence matrix and reads
/// the three Haralick statistics off it. Bins < 0 are invalid pixels.
inline Texture glcm(const std::vector<int>& bins, int side, int levels, int offset, const std::vector<int>& orientations) {
    Texture out;
    int n_hc = 0, n_cor = 0;
    for (int angle : orientations) {
        const double rad = angle * M_PI / 180.0;
        const int dx = static_cast<int>(std::lround(std::cos(rad))) * offset;
        const int dy = -static_cast<int>(std::lround(std::sin(rad))) * offset;
        std::vector<double> P(static_cast<std::size_t>(levels) * levels, 0.0);
        double total = 0.0;
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                const int x2 = x + dx, y2 = y + dy;
                if (x2 < 0 || y2 < 0 || x2 >= side || y2 >= side) continue;
                const int a = bins[y * side + x], b = bins[y2 * side + x2];
                if (a < 0 || b < 0) continue;
                P[a * levels + b] += 1.0;
                P[b * levels + a] += 1.0;
                total += 2.0;
            }
        if (total == 0.0) continue;
        for (auto& p : P) p /= total;
        double hom = 0.0, con = 0.0, mi = 0.0, mj = 0.0;
        for (int i = 0; i < levels; ++i)
            for (int j = 0; j < levels; ++j) {
                const double p = P[i * levels + j];
                hom += p / (1.0 + (i - j) * (i - j));
                con += (i - j) * (i - j) * p;
                mi += i * p;
                mj += j * p;
            }
        double si = 0.0, sj = 0.0, cov = 0.0;
        for (int i = 0; i < levels; ++i)
            for (int j = 0; j < levels; ++j) {
                const double p = P[i * levels + j];
                si += (i - mi) * (i - mi) * p;
                sj += (j - mj) * (j - mj) * p;
                cov += (i - mi) * (j - mj) * p;
            }
        out.hom += hom;
        out.con += con;
        ++n_hc;
        if (si > 0.0 && sj > 0.0) {
            out.cor += cov / std::sqrt(si * sj);
            ++n_cor;
        }
    }
    if (n_hc) {
        out.defined = true;
        out.hom /= n_hc;
        out.con /= n_hc;
    }
    if (n_cor) {
        out.cor_defined = true;
        out.cor /= n_cor;
    }
    return out;
}

/// Direct windowed multi-temporal ratio filter, one window scan per pixel
/// and image. Returns the largest relative deviation from `filtered`.
inline double speckle_max_relative_error(const std::vector<canopy::Raster>& stack,
                                         const std::vector<canopy::Raster>& filtered, int radius) {
    const int w = stack.front().width(), h = stack.front().height();
    const std::size_t n = stack.size();
    auto local_mean = [&](const canopy::Raster& r, int x, int y) {
        double s = 0.0;
        int c = 0;
        for (int yy = y - radius; yy <= y + radius; ++yy)
            for (int xx = x - radius; xx <= x + radius; ++xx) {
                if (xx < 0 || yy < 0 || xx >= w || yy >= h || r.is_nodata(xx, yy)) continue;
                s += r.at(xx, yy);
                ++c;
            }
        return s / c;
    };
    double worst = 0.0;
    std::vector<double> means(n);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double ratio = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                means[i] = local_mean(stack[i], x, y);
                ratio += stack[i].at(x, y) / means[i];
            }
            for (std::size_t k = 0; k < n; ++k) {
                const double expect = means[k] / static_cast<double>(n) * ratio;
                worst = std::max(worst, std::abs(filtered[k].at(x, y) - expect) / expect);
            }
        }
    return worst;
}

struct Metrics {
    double mae, rmse, bias, r2, rmae, rrmse;
};

/// Textbook two-pass formulas.
inline Metrics metrics(const std::vector<double>& p, const std::vector<double>& r) {
    const double n = static_cast<double>(p.size());
    double sa = 0, ss = 0, sb = 0, mp = 0, mr = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sa += std::fabs(p[i] - r[i]);
        ss += (p[i] - r[i]) * (p[i] - r[i]);
        sb += p[i] - r[i];
        mp += p[i];
        mr += r[i];
    }
    mp /= n;
    mr /= n;
    double cov = 0, vp = 0, vr = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        cov += (p[i] - mp) * (r[i] - mr);
        vp += (p[i] - mp) * (p[i] - mp);
        vr += (r[i] - mr) * (r[i] - mr);
    }
    const double rmse = std::sqrt(ss / n);
    return {sa / n, rmse, sb / n, cov * cov / (vp * vr), 100 * sa / n / mr, 100 * rmse / mr};
}

} // namespace oracles
