#include "canopy/model.hpp"

#include "canopy/errors.hpp"
#include "canopy/util.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

namespace canopy {

namespace fs = std::filesystem;
using nlohmann::json;

MatrixView::MatrixView(std::span<const double> values, std::size_t r, std::size_t c)
    : data(values.data()), rows(r), cols(c) {
    if (values.size() != r * c) throw ArgumentError("matrix view size mismatch");
}

std::string to_string(MaxFeatures m) { return m == MaxFeatures::all ? "all" : "sqrt"; }

MaxFeatures parse_max_features(const std::string& s) {
    if (s == "all" || s == "auto") return MaxFeatures::all;
    if (s == "sqrt") return MaxFeatures::sqrt;
    throw ArgumentError("unknown max_features '" + s + "'");
}

std::size_t candidate_feature_count(MaxFeatures m, std::size_t n_features) {
    if (m == MaxFeatures::all) return n_features;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(n_features)))));
}

// ---------------------------------------------------------------- trees

double RegressionTree::predict(std::span<const double> x) const {
    int i = 0;
    while (!nodes_[i].is_leaf()) {
        const TreeNode& n = nodes_[i];
        i = x[n.feature] <= n.threshold ? n.left : n.right;
    }
    return nodes_[i].value;
}

double RegressionTree::predict_truncated(std::span<const double> x, int depth_limit) const {
    int i = 0;
    for (int depth = 0; depth < depth_limit && !nodes_[i].is_leaf(); ++depth) {
        const TreeNode& n = nodes_[i];
        i = x[n.feature] <= n.threshold ? n.left : n.right;
    }
    return nodes_[i].value;
}

int RegressionTree::depth() const {
    if (nodes_.empty()) return 0;
    int best = 0;
    std::vector<std::pair<int, int>> stack{{0, 0}};
    while (!stack.empty()) {
        auto [i, d] = stack.back();
        stack.pop_back();
        best = std::max(best, d);
        if (!nodes_[i].is_leaf()) {
            stack.emplace_back(nodes_[i].left, d + 1);
            stack.emplace_back(nodes_[i].right, d + 1);
        }
    }
    return best;
}

namespace {

/// Rows of X sorted by each column (stable on row index).
std::vector<std::vector<std::uint32_t>> presort_columns(MatrixView X) {
    std::vector<std::vector<std::uint32_t>> sorted(X.cols);
    for (std::size_t f = 0; f < X.cols; ++f) {
        auto& s = sorted[f];
        s.resize(X.rows);
        std::iota(s.begin(), s.end(), 0u);
        std::stable_sort(s.begin(), s.end(), [&](std::uint32_t a, std::uint32_t b) { return X(a, f) < X(b, f); });
    }
    return sorted;
}

/// Grows one CART tree on a bootstrap sample. Every feature keeps its own
/// ordering of the node's sample positions, so a node is a contiguous
/// range [begin, end) in all orderings at once.
class TreeBuilder {
public:
    TreeBuilder(MatrixView X, std::span<const double> y, const std::vector<std::vector<std::uint32_t>>& presorted,
                const Hyperparams& hp, std::uint64_t tree_seed)
        : X_(X), y_(y), hp_(hp), tree_seed_(tree_seed) {
        const std::size_t n = X.rows;
        Rng rng(tree_seed);
        std::vector<std::uint32_t> counts(n, 0);
        for (std::size_t i = 0; i < n; ++i) ++counts[rng.below(n)];

        std::vector<std::uint32_t> start(n, 0);
        sample_.reserve(n);
        for (std::uint32_t row = 0; row < n; ++row) {
            start[row] = static_cast<std::uint32_t>(sample_.size());
            for (std::uint32_t c = 0; c < counts[row]; ++c) sample_.push_back(row);
        }
        order_.resize(X.cols);
        for (std::size_t f = 0; f < X.cols; ++f) {
            auto& o = order_[f];
            o.reserve(n);
            for (std::uint32_t row : presorted[f])
                for (std::uint32_t c = 0; c < counts[row]; ++c) o.push_back(start[row] + c);
        }
        goes_left_.resize(sample_.size());
        buffer_.resize(sample_.size());
        perm_.resize(X.cols);
        mtry_ = candidate_feature_count(hp.max_features, X.cols);
    }

    RegressionTree build() {
        grow(0, sample_.size(), 0, mix64(tree_seed_ ^ 0x5eedULL));
        return RegressionTree(std::move(nodes_));
    }

private:
    double value(std::uint32_t pos, std::size_t f) const { return X_(sample_[pos], f); }
    double target(std::uint32_t pos) const { return y_[sample_[pos]]; }

    int grow(std::size_t begin, std::size_t end, int depth, std::uint64_t key) {
        const std::size_t n = end - begin;
        const auto& base = order_[0];
        double sum = 0.0;
        double lo = target(base[begin]), hi = lo;
        for (std::size_t k = begin; k < end; ++k) {
            const double t = target(base[k]);
            sum += t;
            lo = std::min(lo, t);
            hi = std::max(hi, t);
        }
        const int index = static_cast<int>(nodes_.size());
        nodes_.push_back(TreeNode{-1, 0.0, -1, -1, sum / static_cast<double>(n)});

        if (depth >= hp_.max_depth || n < static_cast<std::size_t>(hp_.min_samples_split) || lo == hi) return index;

        int best_feature = -1;
        double best_threshold = 0.0;
        double best_score = -std::numeric_limits<double>::infinity();

        std::iota(perm_.begin(), perm_.end(), 0u);
        Rng rng(key);
        const bool subsample = mtry_ < X_.cols;
        std::size_t visited = 0;
        for (std::size_t i = 0; i < X_.cols && visited < mtry_; ++i) {
            if (subsample) std::swap(perm_[i], perm_[i + rng.below(X_.cols - i)]);
            const std::size_t f = perm_[i];
            const auto& ord = order_[f];
            if (value(ord[begin], f) == value(ord[end - 1], f)) continue; // constant in this node
            ++visited;

            double left_sum = 0.0;
            for (std::size_t k = begin; k + 1 < end; ++k) {
                left_sum += target(ord[k]);
                const double v = value(ord[k], f);
                const double next = value(ord[k + 1], f);
                if (!(next > v)) continue;
                const double nl = static_cast<double>(k - begin + 1);
                const double nr = static_cast<double>(n) - nl;
                const double right_sum = sum - left_sum;
                const double score = left_sum * left_sum / nl + right_sum * right_sum / nr;
                if (score > best_score) {
                    best_score = score;
                    best_feature = static_cast<int>(f);
                    double threshold = v + (next - v) / 2.0;
                    if (threshold >= next) threshold = v;
                    best_threshold = threshold;
                }
            }
        }
        if (best_feature < 0) return index;

        for (std::size_t k = begin; k < end; ++k) {
            const std::uint32_t pos = base[k];
            goes_left_[pos] = value(pos, static_cast<std::size_t>(best_feature)) <= best_threshold;
        }
        std::size_t n_left = 0;
        for (std::size_t f = 0; f < X_.cols; ++f) {
            auto& ord = order_[f];
            std::size_t l = begin, r = 0;
            for (std::size_t k = begin; k < end; ++k) {
                const std::uint32_t pos = ord[k];
                if (goes_left_[pos]) ord[l++] = pos;
                else buffer_[r++] = pos;
            }
            std::copy(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(r), ord.begin() + static_cast<std::ptrdiff_t>(l));
            n_left = l - begin;
        }

        nodes_[index].feature = best_feature;
        nodes_[index].threshold = best_threshold;
        const int left = grow(begin, begin + n_left, depth + 1, mix64(2 * key + 1));
        nodes_[index].left = left;
        const int right = grow(begin + n_left, end, depth + 1, mix64(2 * key + 2));
        nodes_[index].right = right;
        return index;
    }

    MatrixView X_;
    std::span<const double> y_;
    Hyperparams hp_;
    std::uint64_t tree_seed_;
    std::size_t mtry_ = 0;
    std::vector<std::uint32_t> sample_;
    std::vector<std::vector<std::uint32_t>> order_;
    std::vector<char> goes_left_;
    std::vector<std::uint32_t> buffer_;
    std::vector<std::uint32_t> perm_;
    std::vector<TreeNode> nodes_;
};

} // namespace

Forest fit_random_forest(MatrixView X, std::span<const double> r, const Hyperparams& hp, unsigned threads) {
    if (r.size() != X.rows) throw ArgumentError("target length does not match matrix rows");
    if (X.rows == 0) throw InsufficientDataError("cannot fit a forest on zero rows");
    if (hp.n_estimators < 1 || hp.max_depth < 0 || hp.min_samples_split < 2)
        throw ArgumentError("invalid forest hyperparameters");
    const auto presorted = presort_columns(X);
    Forest forest(static_cast<std::size_t>(hp.n_estimators));
    parallel_for(forest.size(), threads, [&](std::size_t t) {
        TreeBuilder builder(X, r, presorted, hp, hp.seed ^ static_cast<std::uint64_t>(t));
        forest[t] = builder.build();
    });
    return forest;
}

double forest_predict(const Forest& forest, std::span<const double> x) {
    if (forest.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& tree : forest) sum += tree.predict(x);
    return sum / static_cast<double>(forest.size());
}

// ---------------------------------------------------------------- OLS

OlsFit fit_ols(MatrixView X, std::span<const double> y) {
    const std::size_t n = X.rows, p = X.cols;
    if (y.size() != n) throw ArgumentError("target length does not match matrix rows");
    if (n <= p)
        throw InsufficientDataError("OLS needs more rows than features (" + std::to_string(n) + " <= " +
                                    std::to_string(p) + ")");

    // Columns are standardized; constant columns get a zero coefficient.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    Eigen::VectorXd sd = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    double y_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        y_mean += y[i];
        for (std::size_t j = 0; j < p; ++j) mean[static_cast<Eigen::Index>(j)] += X(i, j);
    }
    y_mean /= static_cast<double>(n);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            const double d = X(i, j) - mean[static_cast<Eigen::Index>(j)];
            sd[static_cast<Eigen::Index>(j)] += d * d;
        }
    std::vector<Eigen::Index> active;
    for (std::size_t j = 0; j < p; ++j) {
        const auto jj = static_cast<Eigen::Index>(j);
        sd[jj] = std::sqrt(sd[jj] / static_cast<double>(n));
        if (sd[jj] > 1e-12 * std::max(1.0, std::abs(mean[jj]))) active.push_back(jj);
    }

    OlsFit fit;
    fit.coefficients.assign(p, 0.0);
    fit.intercept = y_mean;
    if (active.empty()) return fit;

    const auto q = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd Z(static_cast<Eigen::Index>(n), q);
    Eigen::VectorXd yc(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        yc[ii] = y[i] - y_mean;
        for (Eigen::Index a = 0; a < q; ++a) {
            const Eigen::Index j = active[static_cast<std::size_t>(a)];
            Z(ii, a) = (X(i, static_cast<std::size_t>(j)) - mean[j]) / sd[j];
        }
    }
    Eigen::MatrixXd gram = Z.transpose() * Z / static_cast<double>(n);
    const Eigen::VectorXd rhs = Z.transpose() * yc / static_cast<double>(n);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
    if (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-10) {
        gram.diagonal().array() += kOlsRidge;
        ldlt.compute(gram);
    }
    const Eigen::VectorXd beta = ldlt.solve(rhs);
    for (Eigen::Index a = 0; a < q; ++a) {
        const Eigen::Index j = active[static_cast<std::size_t>(a)];
        const double c = beta[a] / sd[j];
        fit.coefficients[static_cast<std::size_t>(j)] = c;
        fit.intercept -= c * mean[j];
    }
    return fit;
}

double ols_predict(const OlsFit& fit, std::span<const double> x) {
    double v = fit.intercept;
    for (std::size_t j = 0; j < fit.coefficients.size(); ++j) v += fit.coefficients[j] * x[j];
    return v;
}

// ---------------------------------------------------------------- LFR

namespace {

OlsFit linear_part(MatrixView X, std::span<const double> y) {
    if (X.rows > X.cols) return fit_ols(X, y);
    OlsFit fit;
    fit.coefficients.assign(X.cols, 0.0);
    fit.intercept = X.rows ? std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(X.rows) : 0.0;
    return fit;
}

double clamp_height(double h) { return std::clamp(h, kMinHeight, kMaxHeight); }

} // namespace

LinearForestModel lfr_fit(MatrixView X, std::span<const double> y, const Hyperparams& hp, unsigned threads) {
    if (X.rows == 0) throw InsufficientDataError("cannot fit a model on zero rows");
    const OlsFit lin = linear_part(X, y);
    std::vector<double> residuals(X.rows);
    for (std::size_t i = 0; i < X.rows; ++i) residuals[i] = y[i] - ols_predict(lin, X.row(i));

    LinearForestModel m;
    m.intercept = lin.intercept;
    m.coefficients = lin.coefficients;
    m.trees = fit_random_forest(X, residuals, hp, threads);
    m.hyperparams = hp;
    m.training_meta.n_samples = X.rows;
    return m;
}

double lfr_predict(const LinearForestModel& model, std::span<const double> x) {
    double v = model.intercept;
    for (std::size_t j = 0; j < model.coefficients.size(); ++j) v += model.coefficients[j] * x[j];
    return clamp_height(v + forest_predict(model.trees, x));
}

std::optional<double> lfr_predict(const LinearForestModel& model, std::span<const float> x, float nodata) {
    std::vector<double> xd(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
        if (x[j] == nodata) return std::nullopt;
        xd[j] = x[j];
    }
    return lfr_predict(model, xd);
}

// ---------------------------------------------------------------- grid search

std::vector<Hyperparams> HyperparamGrid::expand(std::uint64_t seed) const {
    std::vector<Hyperparams> out;
    for (int ne : n_estimators)
        for (MaxFeatures mf : max_features)
            for (int md : max_depth)
                for (int mss : min_samples_split) out.push_back(Hyperparams{ne, mf, md, mss, seed});
    auto rank = [](const Hyperparams& h) {
        return std::make_tuple(h.n_estimators, h.max_depth, -h.min_samples_split, h.max_features == MaxFeatures::sqrt ? 0 : 1);
    };
    std::stable_sort(out.begin(), out.end(), [&](const auto& a, const auto& b) { return rank(a) < rank(b); });
    return out;
}

std::vector<int> make_folds(std::size_t n, int k, std::uint64_t seed) {
    if (k < 2) throw ArgumentError("need at least 2 folds");
    if (n < static_cast<std::size_t>(k))
        throw InsufficientDataError("cross-validation needs at least " + std::to_string(k) + " rows, got " +
                                    std::to_string(n));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix64(seed ^ 0xf01dULL));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);

    std::vector<int> fold_of(n, 0);
    const std::size_t base = n / static_cast<std::size_t>(k);
    const std::size_t extra = n % static_cast<std::size_t>(k);
    std::size_t pos = 0;
    for (int f = 0; f < k; ++f) {
        const std::size_t size = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
        for (std::size_t i = 0; i < size; ++i) fold_of[perm[pos++]] = f;
    }
    return fold_of;
}

CVReport grid_search(MatrixView X, std::span<const double> y, const HyperparamGrid& grid, int k, std::uint64_t seed,
                     unsigned threads) {
    if (y.size() != X.rows) throw ArgumentError("target length does not match matrix rows");
    CVReport report;
    report.fold_of = make_folds(X.rows, k, seed);
    const auto points = grid.expand(seed);
    if (points.empty()) throw ArgumentError("empty hyperparameter grid");

    // Per fold: training matrix, linear part, residuals.
    struct FoldData {
        std::vector<std::size_t> train, test;
        std::vector<double> Xtrain;
        OlsFit lin;
        std::vector<double> residuals;
    };
    std::vector<FoldData> folds(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < X.rows; ++i)
        for (int f = 0; f < k; ++f)
            (report.fold_of[i] == f ? folds[f].test : folds[f].train).push_back(i);
    parallel_for(folds.size(), threads, [&](std::size_t f) {
        FoldData& fd = folds[f];
        fd.Xtrain.reserve(fd.train.size() * X.cols);
        std::vector<double> ytrain;
        for (std::size_t i : fd.train) {
            const auto row = X.row(i);
            fd.Xtrain.insert(fd.Xtrain.end(), row.begin(), row.end());
            ytrain.push_back(y[i]);
        }
        const MatrixView Xt(fd.Xtrain, fd.train.size(), X.cols);
        fd.lin = linear_part(Xt, ytrain);
        fd.residuals.resize(fd.train.size());
        for (std::size_t i = 0; i < fd.train.size(); ++i) fd.residuals[i] = ytrain[i] - ols_predict(fd.lin, Xt.row(i));
    });

    // Points sharing (max_features, min_samples_split) share one forest:
    // trees are prefix-stable in n_estimators and truncation-stable in depth.
    std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
    for (std::size_t p = 0; p < points.size(); ++p)
        groups[{static_cast<int>(points[p].max_features), points[p].min_samples_split}].push_back(p);
    std::vector<std::vector<std::size_t>> group_list;
    for (auto& [key, members] : groups) group_list.push_back(members);

    std::vector<std::vector<double>> oof(points.size(), std::vector<double>(X.rows, 0.0));
    const std::size_t n_tasks = group_list.size() * folds.size();
    parallel_for(n_tasks, threads, [&](std::size_t task) {
        const auto& members = group_list[task / folds.size()];
        const FoldData& fd = folds[task % folds.size()];
        Hyperparams hp = points[members.front()];
        for (std::size_t p : members) {
            hp.n_estimators = std::max(hp.n_estimators, points[p].n_estimators);
            hp.max_depth = std::max(hp.max_depth, points[p].max_depth);
        }
        const MatrixView Xt(fd.Xtrain, fd.train.size(), X.cols);
        const Forest forest = fit_random_forest(Xt, fd.residuals, hp, 1);

        std::vector<int> depths;
        for (std::size_t p : members) depths.push_back(points[p].max_depth);
        std::sort(depths.begin(), depths.end());
        depths.erase(std::unique(depths.begin(), depths.end()), depths.end());

        std::vector<double> running(depths.size());
        for (std::size_t i : fd.test) {
            const auto x = X.row(i);
            const double lin = ols_predict(fd.lin, x);
            std::fill(running.begin(), running.end(), 0.0);
            for (std::size_t t = 0; t < forest.size(); ++t) {
                for (std::size_t d = 0; d < depths.size(); ++d) running[d] += forest[t].predict_truncated(x, depths[d]);
                for (std::size_t p : members) {
                    if (static_cast<std::size_t>(points[p].n_estimators) != t + 1) continue;
                    const auto d = static_cast<std::size_t>(
                        std::lower_bound(depths.begin(), depths.end(), points[p].max_depth) - depths.begin());
                    oof[p][i] = clamp_height(lin + running[d] / static_cast<double>(t + 1));
                }
            }
        }
    });

    std::size_t winner = 0;
    for (std::size_t p = 0; p < points.size(); ++p) {
        double mae = 0.0;
        for (std::size_t i = 0; i < X.rows; ++i) mae += std::abs(oof[p][i] - y[i]);
        mae /= static_cast<double>(X.rows);
        report.grid.push_back({points[p], mae});
        if (mae < report.grid[winner].mean_mae) winner = p;
    }
    report.selected = points[winner];
    report.oof_predictions = std::move(oof[winner]);
    return report;
}

bool is_outlier(double pred, double ref) {
    const double err = std::abs(pred - ref);
    if (err > 10.0) return true;
    return ref < 10.0 && err > 1.0 * ref;
}

OutlierResult remove_outliers(const LearningTable& table, std::span<const double> predictions) {
    if (predictions.size() != table.rows()) throw ArgumentError("prediction count does not match table rows");
    std::vector<bool> keep(table.rows());
    OutlierResult out;
    for (std::size_t i = 0; i < table.rows(); ++i) {
        keep[i] = !is_outlier(predictions[i], table.y[i]);
        if (!keep[i]) out.removed_ids.push_back(table.sample_ids[i]);
    }
    out.clean = table.subset(keep);
    return out;
}

StratumTraining train_stratum(const LearningTable& table, const HyperparamGrid& grid, std::uint64_t seed,
                              unsigned threads, int folds) {
    if (table.rows() == 0) throw TrainingError("stratum " + to_string(table.stratum) + " has no rows");
    StratumTraining out;
    out.cv = grid_search(view_of(table), table.y, grid, folds, seed, threads);
    OutlierResult pruned = remove_outliers(table, out.cv.oof_predictions);
    if (pruned.clean.rows() == 0)
        throw TrainingError("every row of stratum " + to_string(table.stratum) + " was removed as an outlier");
    out.model = lfr_fit(view_of(pruned.clean), pruned.clean.y, out.cv.selected, threads);
    out.model.feature_names = table.feature_names;
    out.model.training_meta.stratum = table.stratum;
    out.model.training_meta.n_samples = pruned.clean.rows();
    out.model.training_meta.n_outliers_removed = pruned.removed_ids.size();
    for (const auto& g : out.cv.grid)
        if (g.hyperparams == out.cv.selected) out.model.training_meta.cv_mae = g.mean_mae;
    out.removed_ids = std::move(pruned.removed_ids);
    return out;
}

// ---------------------------------------------------------------- prediction

void ModelSet::add(const StratumKey& key, LinearForestModel model) { models_.insert_or_assign(key, std::move(model)); }

const LinearForestModel* ModelSet::find(std::uint32_t ser_code, LeafType leaf) const {
    if (auto it = models_.find(StratumKey{ser_code, leaf}); it != models_.end()) return &it->second;
    if (auto it = models_.find(StratumKey{0, leaf}); it != models_.end()) return &it->second;
    return nullptr;
}

Raster predict_map(const ModelSet& models, const FeatureStack& stack, const CategoricalRaster& ser,
                   const CategoricalRaster& dlt, int tile_size, unsigned threads) {
    const Grid grids[] = {stack.grid(), ser.grid(), dlt.grid()};
    assert_aligned(grids);
    if (tile_size < 1) throw ArgumentError("tile size must be >= 1");
    const auto names = stack.names();
    for (const auto& [key, m] : models.models())
        if (m.feature_names != names)
            throw ConsistencyError("model " + to_string(key) + " feature order does not match the stack");

    const Grid& g = stack.grid();
    Raster out(g);
    const int tiles_x = (g.width + tile_size - 1) / tile_size;
    const int tiles_y = (g.height + tile_size - 1) / tile_size;
    parallel_for(static_cast<std::size_t>(tiles_x) * static_cast<std::size_t>(tiles_y), threads, [&](std::size_t t) {
        const int tx = static_cast<int>(t % static_cast<std::size_t>(tiles_x));
        const int ty = static_cast<int>(t / static_cast<std::size_t>(tiles_x));
        std::vector<float> x(stack.size());
        for (int row = ty * tile_size; row < std::min(g.height, (ty + 1) * tile_size); ++row) {
            for (int col = tx * tile_size; col < std::min(g.width, (tx + 1) * tile_size); ++col) {
                const auto leaf = leaf_type_from_code(dlt.at(col, row));
                const std::uint16_t ser_code = ser.at(col, row);
                if (!leaf || ser_code == 0) continue;
                const LinearForestModel* model = models.find(ser_code, *leaf);
                if (!model) continue;
                for (std::size_t b = 0; b < stack.size(); ++b) x[b] = stack.band(b).at(col, row);
                if (auto h = lfr_predict(*model, x, g.nodata)) out.at(col, row) = static_cast<float>(*h);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------- persistence

namespace {

json tree_to_json(const RegressionTree& tree, int i) {
    const TreeNode& n = tree.nodes()[static_cast<std::size_t>(i)];
    if (n.is_leaf()) return json{{"value", n.value}};
    return json{{"feature", n.feature},
                {"threshold", n.threshold},
                {"left", tree_to_json(tree, n.left)},
                {"right", tree_to_json(tree, n.right)}};
}

int tree_from_json(const json& j, std::vector<TreeNode>& nodes, std::size_t n_features) {
    const int index = static_cast<int>(nodes.size());
    nodes.emplace_back();
    if (j.contains("value")) {
        nodes[static_cast<std::size_t>(index)].value = j.at("value").get<double>();
        return index;
    }
    const int feature = j.at("feature").get<int>();
    if (feature < 0 || static_cast<std::size_t>(feature) >= n_features)
        throw InputFormatError("tree node feature index out of range");
    const double threshold = j.at("threshold").get<double>();
    const int left = tree_from_json(j.at("left"), nodes, n_features);
    const int right = tree_from_json(j.at("right"), nodes, n_features);
    TreeNode& n = nodes[static_cast<std::size_t>(index)];
    n.feature = feature;
    n.threshold = threshold;
    n.left = left;
    n.right = right;
    return index;
}

} // namespace

std::string model_to_json(const LinearForestModel& m) {
    json j;
    j["format"] = "canopy-forge/linear-forest";
    j["version"] = 1;
    j["stratum"] = {{"ser", m.training_meta.stratum.ser_code},
                    {"leaf_type", to_string(m.training_meta.stratum.leaf_type)}};
    j["feature_names"] = m.feature_names;
    j["intercept"] = m.intercept;
    j["coefficients"] = m.coefficients;
    j["hyperparams"] = {{"n_estimators", m.hyperparams.n_estimators},
                        {"max_features", to_string(m.hyperparams.max_features)},
                        {"max_depth", m.hyperparams.max_depth},
                        {"min_samples_split", m.hyperparams.min_samples_split},
                        {"seed", m.hyperparams.seed}};
    j["training_meta"] = {{"n_samples", m.training_meta.n_samples},
                          {"n_outliers_removed", m.training_meta.n_outliers_removed},
                          {"cv_mae", m.training_meta.cv_mae}};
    json trees = json::array();
    for (const auto& t : m.trees) trees.push_back(tree_to_json(t, 0));
    j["trees"] = std::move(trees);
    return j.dump();
}

LinearForestModel model_from_json(const std::string& text) {
    LinearForestModel m;
    try {
        const json j = json::parse(text);
        m.training_meta.stratum.ser_code = j.at("stratum").at("ser").get<std::uint32_t>();
        m.training_meta.stratum.leaf_type = parse_leaf_type(j.at("stratum").at("leaf_type").get<std::string>());
        m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        m.intercept = j.at("intercept").get<double>();
        m.coefficients = j.at("coefficients").get<std::vector<double>>();
        if (m.coefficients.size() != m.feature_names.size())
            throw InputFormatError("coefficient count does not match feature names");
        const json& hp = j.at("hyperparams");
        m.hyperparams.n_estimators = hp.at("n_estimators").get<int>();
        m.hyperparams.max_features = parse_max_features(hp.at("max_features").get<std::string>());
        m.hyperparams.max_depth = hp.at("max_depth").get<int>();
        m.hyperparams.min_samples_split = hp.at("min_samples_split").get<int>();
        m.hyperparams.seed = hp.at("seed").get<std::uint64_t>();
        const json& meta = j.at("training_meta");
        m.training_meta.n_samples = meta.at("n_samples").get<std::size_t>();
        m.training_meta.n_outliers_removed = meta.at("n_outliers_removed").get<std::size_t>();
        m.training_meta.cv_mae = meta.at("cv_mae").get<double>();
        for (const auto& t : j.at("trees")) {
            std::vector<TreeNode> nodes;
            tree_from_json(t, nodes, m.feature_names.size());
            m.trees.emplace_back(std::move(nodes));
        }
    } catch (const json::exception& e) {
        throw InputFormatError(std::string("malformed model JSON: ") + e.what());
    } catch (const ArgumentError& e) {
        throw InputFormatError(std::string("malformed model JSON: ") + e.what());
    }
    return m;
}

std::string model_file_name(const StratumKey& key) { return "model_" + stratum_tag(key) + ".json"; }

void save_model(const LinearForestModel& model, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc | std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os << model_to_json(model) << '\n';
}

LinearForestModel load_model(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputFormatError("cannot open model " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return model_from_json(ss.str());
}

ModelSet load_models(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.starts_with("model_") && name.ends_with(".json")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    ModelSet set;
    for (const auto& f : files) {
        LinearForestModel m = load_model(f);
        const StratumKey key = m.training_meta.stratum;
        set.add(key, std::move(m));
    }
    if (set.empty()) throw InputFormatError("no model_*.json files in " + dir.string());
    return set;
}

} // namespace canopy
