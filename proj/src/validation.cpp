#include "canopy/validation.hpp"

#include "canopy/errors.hpp"
#include "canopy/util.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace canopy {

MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> ref) {
    if (pred.size() != ref.size()) throw ArgumentError("prediction and reference lengths differ");
    if (pred.empty()) throw ArgumentError("metrics need at least one pair");
    const std::size_t n = pred.size();
    const double dn = static_cast<double>(n);

    double mean_p = 0.0, mean_r = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mean_p += pred[i];
        mean_r += ref[i];
    }
    mean_p /= dn;
    mean_r /= dn;

    double se = 0.0, ae = 0.0, err = 0.0, cov = 0.0, vp = 0.0, vr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = pred[i] - ref[i];
        se += e * e;
        ae += std::abs(e);
        err += e;
        const double dp = pred[i] - mean_p, dr = ref[i] - mean_r;
        cov += dp * dr;
        vp += dp * dp;
        vr += dr * dr;
    }

    MetricsReport m;
    m.n = n;
    m.rmse = std::sqrt(se / dn);
    m.mae = ae / dn;
    m.bias = err / dn;
    if (n >= 2 && vp > 0.0 && vr > 0.0) m.r2 = cov * cov / (vp * vr);
    if (mean_r > 0.0) {
        m.rrmse = 100.0 * m.rmse / mean_r;
        m.rmae = 100.0 * m.mae / mean_r;
    }
    return m;
}

std::string to_string(PlotTarget t) {
    switch (t) {
    case PlotTarget::height: return "height";
    case PlotTarget::volume: return "volume";
    default: return "agb";
    }
}

std::optional<double> plot_reference(const PlotRecord& plot, PlotTarget target) {
    switch (target) {
    case PlotTarget::height: return plot.hdom;
    case PlotTarget::volume: return plot.volume;
    default: return plot.agb;
    }
}

namespace {

std::string group_of(const PlotRecord& p, GroupBy g) {
    switch (g) {
    case GroupBy::leaf_type: return to_string(p.leaf_type);
    case GroupBy::site: return to_string(p.source);
    default: return "all";
    }
}

MetricsReport metrics_of(const std::vector<PairedValue>& pairs) {
    std::vector<double> pred, ref;
    for (const auto& p : pairs) {
        pred.push_back(p.pred);
        ref.push_back(p.ref);
    }
    return compute_metrics(pred, ref);
}

} // namespace

PlotComparison compare_map_plots(const Raster& map, std::span<const PlotRecord> plots, PlotTarget target,
                                 GroupBy group_by) {
    PlotComparison out;
    std::map<std::string, std::vector<PairedValue>> grouped;
    for (const auto& p : plots) {
        const auto ref = plot_reference(p, target);
        if (!ref) {
            ++out.dropped_missing_reference;
            continue;
        }
        const auto [c, r] = map.grid().pixel_of(p.x, p.y);
        if (!map.grid().contains(c, r)) {
            ++out.dropped_outside;
            continue;
        }
        const float v = map.at(c, r);
        if (v == map.nodata()) {
            ++out.dropped_nodata;
            continue;
        }
        PairedValue pv{p.id, group_of(p, group_by), *ref, static_cast<double>(v)};
        grouped[pv.group].push_back(pv);
        out.pairs.push_back(std::move(pv));
    }
    if (out.pairs.empty()) throw Error("no plot could be paired with a valid map value");
    for (const auto& [g, pairs] : grouped) out.groups.emplace(g, metrics_of(pairs));
    return out;
}

ChmComparison compare_map_chm(const Raster& pred, const Raster& chm_fine, const CategoricalRaster* dlt) {
    const Grid& pg = pred.grid();
    if (dlt) {
        const Grid grids[] = {pg, dlt->grid()};
        assert_aligned(grids);
    }
    const Raster chm = resample_max(chm_fine, pg.pixel_size);
    const Grid& cg = chm.grid();

    const double off_x = (cg.origin_x - pg.origin_x) / pg.pixel_size;
    const double off_y = (pg.origin_y - cg.origin_y) / pg.pixel_size;
    const long col0 = std::lround(off_x), row0 = std::lround(off_y);
    if (std::abs(off_x - static_cast<double>(col0)) > 1e-6 || std::abs(off_y - static_cast<double>(row0)) > 1e-6)
        throw ArgumentError("CHM origin does not fall on the prediction grid");
    const long c_begin = std::max(0L, col0), c_end = std::min<long>(pg.width, col0 + cg.width);
    const long r_begin = std::max(0L, row0), r_end = std::min<long>(pg.height, row0 + cg.height);
    if (c_begin >= c_end || r_begin >= r_end) throw ArgumentError("CHM and prediction extents are disjoint");

    ChmComparison out;
    std::map<std::string, std::vector<PairedValue>> by_leaf;
    for (long r = r_begin; r < r_end; ++r) {
        for (long c = c_begin; c < c_end; ++c) {
            const float p = pred.at(static_cast<int>(c), static_cast<int>(r));
            const float h = chm.at(static_cast<int>(c - col0), static_cast<int>(r - row0));
            if (p == pg.nodata || h == cg.nodata) continue;
            PairedValue pv{std::to_string(c) + ":" + std::to_string(r), "all", static_cast<double>(h),
                           static_cast<double>(p)};
            if (dlt) {
                if (const auto leaf = leaf_type_from_code(dlt->at(static_cast<int>(c), static_cast<int>(r)))) {
                    pv.group = to_string(*leaf);
                    by_leaf[pv.group].push_back(pv);
                }
            }
            out.pairs.push_back(std::move(pv));
        }
    }
    if (out.pairs.empty()) throw Error("no overlapping valid pixels between prediction and CHM");
    out.all = metrics_of(out.pairs);
    for (const auto& [g, pairs] : by_leaf) out.by_leaf_type.emplace(g, metrics_of(pairs));
    return out;
}

AggregationResult aggregate_by_class(std::span<const double> pred, std::span<const double> ref,
                                     std::span<const std::uint32_t> classes) {
    if (pred.size() != ref.size() || pred.size() != classes.size())
        throw ArgumentError("aggregate_by_class: input lengths differ");
    std::map<std::uint32_t, ClassAggregate> acc;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (classes[i] == 0) continue;
        auto& a = acc[classes[i]];
        a.code = classes[i];
        ++a.n;
        a.mean_pred += pred[i];
        a.mean_ref += ref[i];
    }
    if (acc.empty()) throw ArgumentError("aggregate_by_class: no class with a valid pair");
    AggregationResult out;
    std::vector<double> mp, mr;
    for (auto& [code, a] : acc) {
        a.mean_pred /= static_cast<double>(a.n);
        a.mean_ref /= static_cast<double>(a.n);
        out.classes.push_back(a);
        mp.push_back(a.mean_pred);
        mr.push_back(a.mean_ref);
    }
    out.report = compute_metrics(mp, mr);
    return out;
}

AggregationResult aggregate_by_class(const Raster& pred, const Raster& ref, const CategoricalRaster& classes) {
    assert_aligned({&pred, &ref, &classes});
    std::vector<double> p, r;
    std::vector<std::uint32_t> c;
    for (std::size_t i = 0; i < pred.values().size(); ++i) {
        const float a = pred.values()[i], b = ref.values()[i];
        if (a == pred.nodata() || b == ref.nodata() || classes.codes()[i] == 0) continue;
        p.push_back(a);
        r.push_back(b);
        c.push_back(classes.codes()[i]);
    }
    return aggregate_by_class(p, r, c);
}

AggregationResult aggregate_by_class(const Raster& pred, std::span<const PlotRecord> plots, PlotTarget target,
                                     const std::function<std::uint32_t(const PlotRecord&)>& class_of) {
    std::vector<double> p, r;
    std::vector<std::uint32_t> c;
    for (const auto& plot : plots) {
        const auto ref = plot_reference(plot, target);
        if (!ref) continue;
        const auto [col, row] = pred.grid().pixel_of(plot.x, plot.y);
        if (!pred.grid().contains(col, row) || pred.is_nodata(col, row)) continue;
        const std::uint32_t code = class_of(plot);
        if (code == 0) continue;
        p.push_back(pred.at(col, row));
        r.push_back(*ref);
        c.push_back(code);
    }
    return aggregate_by_class(p, r, c);
}

AggregationResult aggregate_by_class(const Raster& pred, std::span<const PlotRecord> plots, PlotTarget target,
                                     const CategoricalRaster& classes) {
    assert_aligned({&pred, &classes});
    return aggregate_by_class(pred, plots, target, [&](const PlotRecord& plot) -> std::uint32_t {
        const auto [col, row] = classes.grid().pixel_of(plot.x, plot.y);
        return classes.grid().contains(col, row) ? classes.at(col, row) : 0u;
    });
}

void write_pairs_csv(std::span<const PairedValue> pairs, const std::string& path) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    os << "id,group,ref,pred\n";
    for (const auto& v : pairs) os << v.id << ',' << v.group << ',' << format_double(v.ref) << ',' << format_double(v.pred) << '\n';
}

} // namespace canopy
