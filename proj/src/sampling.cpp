#include "canopy/sampling.hpp"

#include "canopy/errors.hpp"
#include "canopy/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace canopy {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(BeamClass b) { return b == BeamClass::full_power ? "full_power" : "coverage"; }
std::string to_string(LeafType t) { return t == LeafType::broadleaved ? "broadleaved" : "coniferous"; }
std::string to_string(PlotSource s) {
    switch (s) {
    case PlotSource::NFI: return "NFI";
    case PlotSource::ONF: return "ONF";
    default: return "synthetic";
    }
}

LeafType parse_leaf_type(const std::string& s) {
    if (s == "broadleaved" || s == "b" || s == "1") return LeafType::broadleaved;
    if (s == "coniferous" || s == "c" || s == "2") return LeafType::coniferous;
    throw ArgumentError("unknown leaf type '" + s + "'");
}

std::optional<LeafType> leaf_type_from_code(std::uint16_t code) {
    if (code == 1) return LeafType::broadleaved;
    if (code == 2) return LeafType::coniferous;
    return std::nullopt;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

namespace {

double parse_double(const std::string& s, const char* field) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = s.data() + s.size();
    while (b < e && *b == ' ') ++b;
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e || !std::isfinite(v))
        throw InputFormatError(std::string("bad number for ") + field + ": '" + s + "'");
    return v;
}

BeamClass parse_beam(const std::string& s) {
    if (s == "full_power" || s == "full") return BeamClass::full_power;
    if (s == "coverage") return BeamClass::coverage;
    throw InputFormatError("unknown beam class '" + s + "'");
}

PlotSource parse_source(const std::string& s) {
    if (s == "NFI") return PlotSource::NFI;
    if (s == "ONF") return PlotSource::ONF;
    if (s == "synthetic") return PlotSource::synthetic;
    throw InputFormatError("unknown plot source '" + s + "'");
}

void expect_header(std::istream& is, const std::string& expected, const fs::path& path) {
    std::string header;
    if (!std::getline(is, header)) throw InputFormatError("empty CSV " + path.string());
    if (!header.empty() && header.back() == '\r') header.pop_back();
    if (header != expected)
        throw InputFormatError("unexpected CSV header in " + path.string() + ": expected '" + expected + "'");
}

} // namespace

bool passes_quality(const FootprintSample& s, const QualityFilter& q) {
    if (q.full_power_only && s.beam != BeamClass::full_power) return false;
    if (!(s.sensitivity > q.min_sensitivity)) return false;
    if (q.date_from && s.date < *q.date_from) return false;
    if (q.date_to && s.date > *q.date_to) return false;
    return true;
}

FootprintLoad load_footprints(const fs::path& path, const QualityFilter& quality) {
    std::ifstream is(path);
    if (!is) throw InputFormatError("cannot open " + path.string());
    expect_header(is, "id,x,y,rh98,beam,sensitivity,date", path);

    FootprintLoad out;
    std::string line;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        ++out.rows_read;
        FootprintSample s;
        try {
            const auto f = split_csv_line(line);
            if (f.size() != 7) throw InputFormatError("expected 7 fields, got " + std::to_string(f.size()));
            s.id = f[0];
            s.x = parse_double(f[1], "x");
            s.y = parse_double(f[2], "y");
            s.rh98 = parse_double(f[3], "rh98");
            s.beam = parse_beam(f[4]);
            s.sensitivity = parse_double(f[5], "sensitivity");
            s.date = f[6];
            if (s.rh98 < 0.0) throw InputFormatError("rh98 must be >= 0");
            if (s.sensitivity < 0.0 || s.sensitivity > 1.0) throw InputFormatError("sensitivity outside [0,1]");
        } catch (const InputFormatError& e) {
            out.errors.push_back({line_no, e.what()});
            continue;
        }
        if (quality.full_power_only && s.beam != BeamClass::full_power) {
            ++out.dropped_beam;
        } else if (!(s.sensitivity > quality.min_sensitivity)) {
            ++out.dropped_sensitivity;
        } else if ((quality.date_from && s.date < *quality.date_from) || (quality.date_to && s.date > *quality.date_to)) {
            ++out.dropped_date;
        } else {
            out.samples.push_back(std::move(s));
        }
    }
    if (out.samples.empty()) out.warnings.push_back("no footprint passed the quality filters in " + path.string());
    return out;
}

void write_footprints(std::span<const FootprintSample> samples, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    os << "id,x,y,rh98,beam,sensitivity,date\n";
    for (const auto& s : samples)
        os << s.id << ',' << format_double(s.x) << ',' << format_double(s.y) << ',' << format_double(s.rh98) << ','
           << to_string(s.beam) << ',' << format_double(s.sensitivity) << ',' << s.date << '\n';
}

PlotLoad load_plots(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw InputFormatError("cannot open " + path.string());
    expect_header(is, "id,x,y,hdom,volume,agb,leaf_type,source", path);
    PlotLoad out;
    std::string line;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        try {
            const auto f = split_csv_line(line);
            if (f.size() != 8) throw InputFormatError("expected 8 fields, got " + std::to_string(f.size()));
            PlotRecord p;
            p.id = f[0];
            p.x = parse_double(f[1], "x");
            p.y = parse_double(f[2], "y");
            p.hdom = parse_double(f[3], "hdom");
            if (!f[4].empty()) p.volume = parse_double(f[4], "volume");
            if (!f[5].empty()) p.agb = parse_double(f[5], "agb");
            try {
                p.leaf_type = parse_leaf_type(f[6]);
            } catch (const ArgumentError& e) {
                throw InputFormatError(e.what());
            }
            p.source = parse_source(f[7]);
            if (!(p.hdom > 0.0)) throw InputFormatError("hdom must be > 0");
            if ((p.volume && *p.volume < 0.0) || (p.agb && *p.agb < 0.0))
                throw InputFormatError("volume/agb must be >= 0");
            out.plots.push_back(std::move(p));
        } catch (const InputFormatError& e) {
            out.errors.push_back({line_no, e.what()});
        }
    }
    return out;
}

void write_plots(std::span<const PlotRecord> plots, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    os << "id,x,y,hdom,volume,agb,leaf_type,source\n";
    for (const auto& p : plots) {
        os << p.id << ',' << format_double(p.x) << ',' << format_double(p.y) << ',' << format_double(p.hdom) << ',';
        if (p.volume) os << format_double(*p.volume);
        os << ',';
        if (p.agb) os << format_double(*p.agb);
        os << ',' << to_string(p.leaf_type) << ',' << to_string(p.source) << '\n';
    }
}

std::vector<std::pair<int, int>> footprint_pixels(const Grid& grid, double x, double y, double radius) {
    std::vector<std::pair<int, int>> out;
    const double ps = grid.pixel_size;
    const int c0 = static_cast<int>(std::floor((x - radius - grid.origin_x) / ps));
    const int c1 = static_cast<int>(std::ceil((x + radius - grid.origin_x) / ps));
    const int r0 = static_cast<int>(std::floor((grid.origin_y - (y + radius)) / ps));
    const int r1 = static_cast<int>(std::ceil((grid.origin_y - (y - radius)) / ps));
    const double r2 = radius * radius;
    for (int r = r0; r <= r1; ++r) {
        for (int c = c0; c <= c1; ++c) {
            if (!grid.contains(c, r)) continue;
            const double dx = grid.center_x(c) - x;
            const double dy = grid.center_y(r) - y;
            if (dx * dx + dy * dy <= r2) out.emplace_back(c, r);
        }
    }
    return out;
}

std::optional<std::vector<double>> extract_footprint_features(const FootprintSample& sample, const FeatureStack& stack,
                                                              double radius) {
    const Grid& g = stack.grid();
    const auto [cc, cr] = g.pixel_of(sample.x, sample.y);
    if (!g.contains(cc, cr)) return std::nullopt;
    const auto pixels = footprint_pixels(g, sample.x, sample.y, radius);
    if (pixels.empty()) return std::nullopt;

    std::vector<double> out(stack.size());
    for (std::size_t b = 0; b < stack.size(); ++b) {
        const Raster& band = stack.band(b);
        double sum = 0.0;
        int n = 0;
        for (const auto& [c, r] : pixels) {
            const float v = band.at(c, r);
            if (v == band.nodata()) continue;
            sum += v;
            ++n;
        }
        if (n == 0) return std::nullopt;
        out[b] = sum / n;
    }
    return out;
}

std::string to_string(const StratumKey& k) {
    return (k.is_fallback() ? std::string("all") : std::to_string(k.ser_code)) + "/" + to_string(k.leaf_type);
}

std::string stratum_tag(const StratumKey& k) {
    return (k.is_fallback() ? std::string("all") : std::to_string(k.ser_code)) + "_" + to_string(k.leaf_type);
}

void LearningTable::append(std::span<const double> features, double target, const std::string& id) {
    if (features.size() != cols()) throw ArgumentError("feature vector length does not match table columns");
    X.insert(X.end(), features.begin(), features.end());
    y.push_back(target);
    sample_ids.push_back(id);
}

LearningTable LearningTable::subset(const std::vector<bool>& keep) const {
    if (keep.size() != rows()) throw ArgumentError("subset mask length does not match table rows");
    LearningTable out;
    out.stratum = stratum;
    out.feature_names = feature_names;
    for (std::size_t i = 0; i < rows(); ++i)
        if (keep[i]) out.append(row(i), y[i], sample_ids[i]);
    return out;
}

std::map<StratumKey, LearningTable> stratify_and_build(std::span<const FootprintSample> samples,
                                                       const FeatureStack& stack, const CategoricalRaster& ser,
                                                       const CategoricalRaster& dlt, StratifyReport* report,
                                                       unsigned threads) {
    const Grid grids[] = {stack.grid(), ser.grid(), dlt.grid()};
    assert_aligned(grids);

    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return samples[a].id < samples[b].id; });

    enum class Fate { kept, outside, nonforest, no_ser, nodata };
    struct Slot {
        Fate fate = Fate::outside;
        StratumKey key;
        std::vector<double> features;
    };
    std::vector<Slot> slots(order.size());
    const Grid& g = stack.grid();
    parallel_for(order.size(), threads, [&](std::size_t i) {
        const FootprintSample& s = samples[order[i]];
        Slot& slot = slots[i];
        const auto [c, r] = g.pixel_of(s.x, s.y);
        if (!g.contains(c, r)) {
            slot.fate = Fate::outside;
            return;
        }
        const auto leaf = leaf_type_from_code(dlt.at(c, r));
        if (!leaf) {
            slot.fate = Fate::nonforest;
            return;
        }
        const std::uint16_t ser_code = ser.at(c, r);
        if (ser_code == 0) {
            slot.fate = Fate::no_ser;
            return;
        }
        auto f = extract_footprint_features(s, stack);
        if (!f) {
            slot.fate = Fate::nodata;
            return;
        }
        slot.fate = Fate::kept;
        slot.key = {ser_code, *leaf};
        slot.features = std::move(*f);
    });

    StratifyReport rep;
    rep.input = samples.size();
    std::map<StratumKey, LearningTable> tables;
    const auto names = stack.names();
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const Slot& slot = slots[i];
        switch (slot.fate) {
        case Fate::outside: ++rep.dropped_outside; continue;
        case Fate::nonforest: ++rep.dropped_nonforest; continue;
        case Fate::no_ser: ++rep.dropped_no_ser; continue;
        case Fate::nodata: ++rep.dropped_nodata_features; continue;
        case Fate::kept: break;
        }
        auto [it, inserted] = tables.try_emplace(slot.key);
        if (inserted) {
            it->second.stratum = slot.key;
            it->second.feature_names = names;
        }
        const FootprintSample& s = samples[order[i]];
        it->second.append(slot.features, s.rh98, s.id);
    }
    if (report) *report = rep;
    return tables;
}

std::map<StratumKey, LearningTable> merge_small_strata(std::map<StratumKey, LearningTable> tables,
                                                       std::size_t min_rows) {
    std::map<StratumKey, LearningTable> out;
    for (LeafType leaf : {LeafType::broadleaved, LeafType::coniferous}) {
        bool any_small = false;
        for (const auto& [k, t] : tables)
            if (!k.is_fallback() && k.leaf_type == leaf && t.rows() < min_rows) any_small = true;
        if (!any_small) continue;

        // Fallback rows are ordered by sample id, like every other table.
        std::vector<std::pair<const LearningTable*, std::size_t>> rows;
        for (const auto& [k, t] : tables)
            if (!k.is_fallback() && k.leaf_type == leaf)
                for (std::size_t i = 0; i < t.rows(); ++i) rows.emplace_back(&t, i);
        std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
            return a.first->sample_ids[a.second] < b.first->sample_ids[b.second];
        });
        LearningTable fallback;
        fallback.stratum = {0, leaf};
        for (const auto& [t, i] : rows) {
            if (fallback.feature_names.empty()) fallback.feature_names = t->feature_names;
            fallback.append(t->row(i), t->y[i], t->sample_ids[i]);
        }
        out.emplace(fallback.stratum, std::move(fallback));
    }
    for (auto& [k, t] : tables)
        if (k.is_fallback() || t.rows() >= min_rows) out.emplace(k, std::move(t));
    return out;
}

namespace {

fs::path sidecar_path(const fs::path& csv) {
    fs::path p = csv;
    p.replace_extension(".json");
    return p;
}

} // namespace

void write_learning_table(const LearningTable& table, const fs::path& csv_path, const std::string& provenance_json) {
    if (csv_path.has_parent_path()) fs::create_directories(csv_path.parent_path());
    {
        std::ofstream os(csv_path, std::ios::trunc);
        if (!os) throw Error("cannot write " + csv_path.string());
        os << "id";
        for (const auto& n : table.feature_names) os << ',' << n;
        os << ",rh98\n";
        for (std::size_t i = 0; i < table.rows(); ++i) {
            os << table.sample_ids[i];
            for (double v : table.row(i)) os << ',' << format_double(v);
            os << ',' << format_double(table.y[i]) << '\n';
        }
    }
    json side;
    side["stratum"] = {{"ser", table.stratum.ser_code}, {"leaf_type", to_string(table.stratum.leaf_type)},
                       {"fallback", table.stratum.is_fallback()}};
    side["feature_names"] = table.feature_names;
    side["rows"] = table.rows();
    side["provenance"] = json::parse(provenance_json);
    std::ofstream os(sidecar_path(csv_path), std::ios::trunc);
    os << side.dump(2) << '\n';
}

LearningTable read_learning_table(const fs::path& csv_path) {
    std::ifstream side_is(sidecar_path(csv_path));
    if (!side_is) throw InputFormatError("missing learning-table sidecar for " + csv_path.string());
    json side;
    try {
        side = json::parse(side_is);
    } catch (const json::exception& e) {
        throw InputFormatError("malformed sidecar for " + csv_path.string() + ": " + e.what());
    }
    LearningTable t;
    try {
        t.stratum.ser_code = side.at("stratum").at("ser").get<std::uint32_t>();
        t.stratum.leaf_type = parse_leaf_type(side.at("stratum").at("leaf_type").get<std::string>());
        t.feature_names = side.at("feature_names").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw InputFormatError("malformed sidecar for " + csv_path.string() + ": " + e.what());
    }

    std::ifstream is(csv_path);
    if (!is) throw InputFormatError("cannot open " + csv_path.string());
    std::string line;
    if (!std::getline(is, line)) throw InputFormatError("empty learning table " + csv_path.string());
    const auto header = split_csv_line(line);
    if (header.size() != t.cols() + 2) throw InputFormatError("learning table header does not match sidecar");
    for (std::size_t i = 0; i < t.cols(); ++i)
        if (header[i + 1] != t.feature_names[i])
            throw InputFormatError("learning table column " + header[i + 1] + " does not match sidecar order");

    std::size_t line_no = 1;
    std::vector<double> row(t.cols());
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != t.cols() + 2)
            throw InputFormatError(csv_path.string() + ":" + std::to_string(line_no) + ": wrong field count");
        for (std::size_t i = 0; i < t.cols(); ++i) row[i] = parse_double(f[i + 1], "feature");
        t.append(row, parse_double(f.back(), "rh98"), f[0]);
    }
    return t;
}

} // namespace canopy
