#include "grouped_glm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace grouped_glm {

namespace {

constexpr double kRankTolerance = 1e-9;
constexpr double kPinvTolerance = 1e-10;

std::string column_label(const std::vector<std::string>& names, int j) {
    if (j < static_cast<int>(names.size())) return names[j];
    return "x" + std::to_string(j);
}

}  // namespace

void check_full_rank(const Eigen::MatrixXd& x, const std::vector<std::string>& names) {
    if (x.rows() < x.cols()) {
        throw DataError("design has more columns (" + std::to_string(x.cols()) + ") than rows (" +
                        std::to_string(x.rows()) + ")");
    }
    // Scale columns so the rank decision is unit free.
    Eigen::MatrixXd scaled = x;
    for (Eigen::Index j = 0; j < scaled.cols(); ++j) {
        const double norm = scaled.col(j).norm();
        if (norm == 0.0) {
            throw DataError("column '" + column_label(names, static_cast<int>(j)) + "' is identically zero");
        }
        scaled.col(j) /= norm;
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
    qr.setThreshold(kRankTolerance);
    if (qr.rank() < x.cols()) {
        std::string offending;
        const auto& perm = qr.colsPermutation().indices();
        for (Eigen::Index k = qr.rank(); k < x.cols(); ++k) {
            if (!offending.empty()) offending += ", ";
            offending += "'" + column_label(names, perm[k]) + "'";
        }
        throw DataError("design matrix is rank deficient (rank " + std::to_string(qr.rank()) + " of " +
                        std::to_string(x.cols()) + "); linearly dependent column(s): " + offending);
    }
}

GroupedDataset GroupedDataset::build(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                                     std::span<const std::int64_t> group_ids, std::vector<int> z_cols,
                                     std::vector<std::string> column_names) {
    const auto n = y.size();
    if (x.rows() != n || static_cast<Eigen::Index>(group_ids.size()) != n) {
        throw DataError("length mismatch: y has " + std::to_string(n) + " rows, x has " +
                        std::to_string(x.rows()) + ", group ids " + std::to_string(group_ids.size()));
    }
    if (n == 0 || group_ids.empty()) {
        throw DataError("empty dataset: no observations or group ids");
    }
    if (x.cols() == 0) {
        throw DataError("x must include an intercept column");
    }
    if (!y.allFinite() || !x.allFinite()) {
        throw DataError("non-finite value in y or x");
    }
    if (!(x.col(0).array() == 1.0).all()) {
        throw DataError("column 0 of x must be the intercept (all ones)");
    }
    if (!column_names.empty() && static_cast<Eigen::Index>(column_names.size()) != x.cols()) {
        throw DataError("column_names length does not match x");
    }
    if (column_names.empty()) {
        column_names.push_back("(Intercept)");
        for (Eigen::Index j = 1; j < x.cols(); ++j) column_names.push_back("x" + std::to_string(j));
    }
    std::sort(z_cols.begin(), z_cols.end());
    if (std::adjacent_find(z_cols.begin(), z_cols.end()) != z_cols.end()) {
        throw DataError("duplicate index in z_spec");
    }
    for (int c : z_cols) {
        if (c <= 0 || c >= x.cols()) {
            throw DataError("z_spec index " + std::to_string(c) +
                            " must refer to a non-intercept column of x");
        }
    }
    check_full_rank(x, column_names);

    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return group_ids[a] < group_ids[b]; });

    GroupedDataset ds;
    ds.y_.resize(n);
    ds.x_.resize(n, x.cols());
    ds.group_of_.resize(static_cast<std::size_t>(n));
    ds.permutation_ = order;
    ds.z_cols_ = std::move(z_cols);
    ds.names_ = std::move(column_names);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int src = order[static_cast<std::size_t>(i)];
        ds.y_(i) = y(src);
        ds.x_.row(i) = x.row(src);
        const std::int64_t label = group_ids[src];
        if (ds.labels_.empty() || ds.labels_.back() != label) {
            ds.labels_.push_back(label);
            ds.group_start_.push_back(static_cast<int>(i));
        }
        ds.group_of_[static_cast<std::size_t>(i)] = static_cast<int>(ds.labels_.size()) - 1;
    }
    ds.group_start_.push_back(static_cast<int>(n));
    return ds;
}

int GroupedDataset::find_group(std::int64_t label) const {
    const auto it = std::lower_bound(labels_.begin(), labels_.end(), label);
    if (it == labels_.end() || *it != label) return -1;
    return static_cast<int>(it - labels_.begin());
}

Eigen::MatrixXd GroupedDataset::z_block(int g) const {
    const int b = group_begin(g);
    const int m = group_size(g);
    Eigen::MatrixXd z(m, z_dim());
    z.col(0).setOnes();
    for (std::size_t k = 0; k < z_cols_.size(); ++k) {
        z.col(static_cast<Eigen::Index>(k) + 1) = x_.col(z_cols_[k]).segment(b, m);
    }
    return z;
}

Eigen::VectorXd GroupedDataset::z_row(int row) const {
    Eigen::VectorXd z(z_dim());
    z(0) = 1.0;
    for (std::size_t k = 0; k < z_cols_.size(); ++k) {
        z(static_cast<Eigen::Index>(k) + 1) = x_(row, z_cols_[k]);
    }
    return z;
}

std::vector<int> GroupedDataset::singleton_groups() const {
    std::vector<int> out;
    for (int g = 0; g < n_groups(); ++g) {
        if (group_size(g) == 1) out.push_back(g);
    }
    return out;
}

GroupedDataset GroupedDataset::resample_groups(std::span<const int> groups) const {
    int total = 0;
    for (int g : groups) total += group_size(g);
    Eigen::VectorXd y(total);
    Eigen::MatrixXd x(total, x_.cols());
    std::vector<std::int64_t> ids(static_cast<std::size_t>(total));
    int row = 0;
    for (std::size_t k = 0; k < groups.size(); ++k) {
        const int g = groups[k];
        const int m = group_size(g);
        y.segment(row, m) = y_.segment(group_begin(g), m);
        x.middleRows(row, m) = x_.middleRows(group_begin(g), m);
        std::fill_n(ids.begin() + row, m, static_cast<std::int64_t>(k));
        row += m;
    }
    return build(y, x, ids, z_cols_, names_);
}

GroupedDataset GroupedDataset::with_columns(const Eigen::MatrixXd& extra,
                                            const std::vector<std::string>& extra_names) const {
    if (extra.rows() != n_obs()) {
        throw DataError("appended columns have the wrong number of rows");
    }
    GroupedDataset out = *this;
    out.x_.conservativeResize(Eigen::NoChange, x_.cols() + extra.cols());
    out.x_.rightCols(extra.cols()) = extra;
    for (Eigen::Index j = 0; j < extra.cols(); ++j) {
        out.names_.push_back(j < static_cast<Eigen::Index>(extra_names.size())
                                 ? extra_names[static_cast<std::size_t>(j)]
                                 : "aug" + std::to_string(j));
    }
    check_full_rank(out.x_, out.names_);
    return out;
}

GroupedDataset GroupedDataset::with_outcome(const Eigen::VectorXd& y) const {
    if (y.size() != n_obs() || !y.allFinite()) {
        throw DataError("replacement outcome has wrong length or non-finite values");
    }
    GroupedDataset out = *this;
    out.y_ = y;
    return out;
}

GroupedDataset AugmentedDataset::combined() const {
    std::vector<std::string> names;
    const std::string prefix = kind == AugmentKind::GroupMeans ? "mean_" : "proj_";
    for (int c : source_cols) names.push_back(prefix + base.column_names()[static_cast<std::size_t>(c)]);
    try {
        return base.with_columns(aug_cols, names);
    } catch (const DataError& e) {
        throw DataError(std::string("bias-correction regressors are collinear with the design "
                                    "(e.g. every group has one observation, so group means equal "
                                    "the covariates): ") +
                        e.what());
    }
}

AugmentedDataset augment_group_means(const GroupedDataset& ds) {
    const int p = ds.n_fixed();
    AugmentedDataset out{ds, Eigen::MatrixXd(ds.n_obs(), p - 1), AugmentKind::GroupMeans, {}};
    for (int j = 1; j < p; ++j) out.source_cols.push_back(j);
    for (int g = 0; g < ds.n_groups(); ++g) {
        const int b = ds.group_begin(g);
        const int m = ds.group_size(g);
        for (int j = 1; j < p; ++j) {
            const double mean = ds.x().col(j).segment(b, m).mean();
            out.aug_cols.col(j - 1).segment(b, m).setConstant(mean);
        }
    }
    return out;
}

std::vector<int> projection_source_columns(const GroupedDataset& ds) {
    std::vector<int> cols;
    const auto& z = ds.z_cols();
    for (int j = 1; j < ds.n_fixed(); ++j) {
        if (std::find(z.begin(), z.end(), j) == z.end()) cols.push_back(j);
    }
    return cols;
}

std::vector<Eigen::MatrixXd> projection_coefficients(const GroupedDataset& ds,
                                                     const std::vector<int>& source_cols) {
    std::vector<Eigen::MatrixXd> coefs;
    coefs.reserve(static_cast<std::size_t>(ds.n_groups()));
    for (int g = 0; g < ds.n_groups(); ++g) {
        const Eigen::MatrixXd z = ds.z_block(g);
        Eigen::MatrixXd xg(z.rows(), static_cast<Eigen::Index>(source_cols.size()));
        for (std::size_t k = 0; k < source_cols.size(); ++k) {
            xg.col(static_cast<Eigen::Index>(k)) = ds.x().col(source_cols[k]).segment(ds.group_begin(g), z.rows());
        }
        Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod;
        cod.setThreshold(kPinvTolerance);
        cod.compute(z);
        coefs.push_back(cod.solve(xg));
    }
    return coefs;
}

AugmentedDataset augment_projection(const GroupedDataset& ds) {
    AugmentedDataset out{ds, {}, AugmentKind::WithinProjection, projection_source_columns(ds)};
    const auto q = static_cast<Eigen::Index>(out.source_cols.size());
    out.aug_cols.resize(ds.n_obs(), q);
    const auto coefs = projection_coefficients(ds, out.source_cols);
    for (int g = 0; g < ds.n_groups(); ++g) {
        out.aug_cols.middleRows(ds.group_begin(g), ds.group_size(g)) = ds.z_block(g) * coefs[static_cast<std::size_t>(g)];
    }
    return out;
}

}  // namespace grouped_glm
