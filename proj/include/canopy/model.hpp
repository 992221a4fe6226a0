#pragma once

#include "canopy/raster.hpp"
#include "canopy/sampling.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace canopy {

/// Row-major read-only matrix view.
struct MatrixView {
    const double* data = nullptr;
    std::size_t rows = 0;
    std::size_t cols = 0;

    MatrixView() = default;
    MatrixView(std::span<const double> values, std::size_t r, std::size_t c);
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<const double> row(std::size_t r) const { return {data + r * cols, cols}; }
};

inline MatrixView view_of(const LearningTable& t) { return MatrixView(t.X, t.rows(), t.cols()); }

enum class MaxFeatures { all, sqrt };
std::string to_string(MaxFeatures m);
MaxFeatures parse_max_features(const std::string& s);

struct Hyperparams {
    int n_estimators = 100;
    MaxFeatures max_features = MaxFeatures::all;
    int max_depth = 10;
    int min_samples_split = 15;
    std::uint64_t seed = 42;

    bool operator==(const Hyperparams&) const = default;
};

/// Candidate features per node for a table with n_features columns.
std::size_t candidate_feature_count(MaxFeatures m, std::size_t n_features);

struct TreeNode {
    int feature = -1; // -1 for a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0; // mean target of the node's samples
    bool is_leaf() const { return feature < 0; }
};

class RegressionTree {
public:
    RegressionTree() = default;
    explicit RegressionTree(std::vector<TreeNode> nodes) : nodes_(std::move(nodes)) {}

    /// x <= threshold goes left.
    double predict(std::span<const double> x) const;
    /// Prediction of the same tree cut at depth_limit (root is depth 0).
    double predict_truncated(std::span<const double> x, int depth_limit) const;
    int depth() const;
    const std::vector<TreeNode>& nodes() const { return nodes_; }

private:
    std::vector<TreeNode> nodes_;
};

using Forest = std::vector<RegressionTree>;

/// Bootstrap CART forest with the MSE criterion. Tree t uses seed
/// (hp.seed XOR t); node feature subsets are drawn from a stream keyed by
/// the node's path, so a tree grown deeper contains the shallower one.
Forest fit_random_forest(MatrixView X, std::span<const double> r, const Hyperparams& hp, unsigned threads = 1);
double forest_predict(const Forest& forest, std::span<const double> x);

struct OlsFit {
    double intercept = 0.0;
    std::vector<double> coefficients;
};

inline constexpr double kOlsRidge = 1e-8;

/// Least squares with intercept. Throws InsufficientDataError when N <= p.
OlsFit fit_ols(MatrixView X, std::span<const double> y);
double ols_predict(const OlsFit& fit, std::span<const double> x);

inline constexpr double kMinHeight = 0.0;
inline constexpr double kMaxHeight = 60.0;

struct TrainingMeta {
    StratumKey stratum;
    std::size_t n_samples = 0;
    std::size_t n_outliers_removed = 0;
    double cv_mae = 0.0;
};

struct LinearForestModel {
    double intercept = 0.0;
    std::vector<double> coefficients;
    Forest trees;
    Hyperparams hyperparams;
    std::vector<std::string> feature_names;
    TrainingMeta training_meta;
};

/// OLS on (X, y), then a forest on the residuals. With N <= p the linear
/// part is the mean of y and the forest fits the centered targets.
LinearForestModel lfr_fit(MatrixView X, std::span<const double> y, const Hyperparams& hp, unsigned threads = 1);
/// Linear part plus mean tree output, clamped to [0, 60] m.
double lfr_predict(const LinearForestModel& model, std::span<const double> x);
/// Same on a float feature vector; nullopt if any feature equals nodata.
std::optional<double> lfr_predict(const LinearForestModel& model, std::span<const float> x, float nodata);

struct HyperparamGrid {
    std::vector<int> n_estimators{50, 100, 200};
    std::vector<MaxFeatures> max_features{MaxFeatures::all, MaxFeatures::sqrt};
    std::vector<int> max_depth{10, 20, 30};
    std::vector<int> min_samples_split{15, 25, 35};

    /// All combinations in tie-break order: smaller n_estimators, smaller
    /// max_depth, larger min_samples_split, sqrt before all.
    std::vector<Hyperparams> expand(std::uint64_t seed) const;
};

struct GridScore {
    Hyperparams hyperparams;
    double mean_mae = 0.0;
};

struct CVReport {
    std::vector<int> fold_of;              // per sample
    std::vector<double> oof_predictions;   // winner's out-of-fold predictions
    Hyperparams selected;
    std::vector<GridScore> grid;           // in tie-break order
};

/// Seeded shuffle split into k parts whose sizes differ by at most one.
std::vector<int> make_folds(std::size_t n, int k, std::uint64_t seed);

CVReport grid_search(MatrixView X, std::span<const double> y, const HyperparamGrid& grid, int k, std::uint64_t seed,
                     unsigned threads = 1);

/// |pred - ref| > 10, or ref < 10 and |pred - ref| / ref > 1.
bool is_outlier(double pred, double ref);

struct OutlierResult {
    LearningTable clean;
    std::vector<std::string> removed_ids;
};

OutlierResult remove_outliers(const LearningTable& table, std::span<const double> predictions);

struct StratumTraining {
    LinearForestModel model;
    CVReport cv;
    std::vector<std::string> removed_ids;
};

/// Grid search on the raw table, outlier pruning with the winner's
/// out-of-fold predictions, then a final fit on the cleaned table.
StratumTraining train_stratum(const LearningTable& table, const HyperparamGrid& grid, std::uint64_t seed,
                              unsigned threads = 1, int folds = 10);

/// Models by stratum; strata without their own model use the leaf-type
/// fallback (ser_code 0) when present.
class ModelSet {
public:
    void add(const StratumKey& key, LinearForestModel model);
    const LinearForestModel* find(std::uint32_t ser_code, LeafType leaf) const;
    const std::map<StratumKey, LinearForestModel>& models() const { return models_; }
    bool empty() const { return models_.empty(); }

private:
    std::map<StratumKey, LinearForestModel> models_;
};

Raster predict_map(const ModelSet& models, const FeatureStack& stack, const CategoricalRaster& ser,
                   const CategoricalRaster& dlt, int tile_size = 256, unsigned threads = 1);

std::string model_to_json(const LinearForestModel& model);
LinearForestModel model_from_json(const std::string& text);
void save_model(const LinearForestModel& model, const std::filesystem::path& path);
LinearForestModel load_model(const std::filesystem::path& path);
std::string model_file_name(const StratumKey& key);
ModelSet load_models(const std::filesystem::path& dir);

} // namespace canopy
