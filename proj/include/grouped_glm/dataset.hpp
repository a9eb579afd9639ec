#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace grouped_glm {

/// Malformed or unusable input data (length mismatch, rank deficiency, ...).
class DataError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Outcome, fixed design and group structure for one grouped-data problem.
///
/// Rows are stored sorted by group id (stable within a group) so that every
/// group occupies a contiguous block. `input_row(i)` maps a stored row back to
/// the caller's original row order. Column 0 of `x()` is the intercept; the
/// random-effect design for row i is [1, x(i, z_cols...)].
class GroupedDataset {
public:
    GroupedDataset() = default;

    /// Validates and sorts. `column_names` may be empty (names x0, x1, ...).
    static GroupedDataset build(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                                std::span<const std::int64_t> group_ids,
                                std::vector<int> z_cols = {},
                                std::vector<std::string> column_names = {});

    const Eigen::VectorXd& y() const { return y_; }
    const Eigen::MatrixXd& x() const { return x_; }
    const std::vector<int>& z_cols() const { return z_cols_; }
    const std::vector<std::string>& column_names() const { return names_; }

    int n_obs() const { return static_cast<int>(y_.size()); }
    int n_fixed() const { return static_cast<int>(x_.cols()); }
    int n_groups() const { return static_cast<int>(group_start_.size()) - 1; }
    /// Width d of the per-group random-effect design.
    int z_dim() const { return 1 + static_cast<int>(z_cols_.size()); }
    bool intercept_only_z() const { return z_cols_.empty(); }

    int group_begin(int g) const { return group_start_[g]; }
    int group_end(int g) const { return group_start_[g + 1]; }
    int group_size(int g) const { return group_start_[g + 1] - group_start_[g]; }
    int group_of(int row) const { return group_of_[row]; }
    std::int64_t group_label(int g) const { return labels_[g]; }
    const std::vector<std::int64_t>& group_labels() const { return labels_; }
    /// Index of a group label, or -1 if absent.
    int find_group(std::int64_t label) const;

    int input_row(int stored_row) const { return permutation_[stored_row]; }
    const std::vector<int>& permutation() const { return permutation_; }

    /// Z_g, n_g x d.
    Eigen::MatrixXd z_block(int g) const;
    /// Row i of Z (length d).
    Eigen::VectorXd z_row(int row) const;

    /// Groups containing a single observation.
    std::vector<int> singleton_groups() const;

    /// Rebuild with rows taken from whole groups in `groups` (duplicates become
    /// distinct clusters with fresh ids 0..k-1).
    GroupedDataset resample_groups(std::span<const int> groups) const;

    /// Same groups and rows with an extra block of columns appended to x.
    GroupedDataset with_columns(const Eigen::MatrixXd& extra,
                                const std::vector<std::string>& extra_names) const;

    /// Same rows with a replaced outcome vector (stored order).
    GroupedDataset with_outcome(const Eigen::VectorXd& y) const;

private:
    Eigen::VectorXd y_;
    Eigen::MatrixXd x_;
    std::vector<int> z_cols_;
    std::vector<std::string> names_;
    std::vector<int> group_of_;
    std::vector<int> group_start_;
    std::vector<std::int64_t> labels_;
    std::vector<int> permutation_;
};

inline GroupedDataset build_dataset(const Eigen::VectorXd& y, const Eigen::MatrixXd& x,
                                    std::span<const std::int64_t> group_ids,
                                    std::vector<int> z_cols = {},
                                    std::vector<std::string> column_names = {}) {
    return GroupedDataset::build(y, x, group_ids, std::move(z_cols), std::move(column_names));
}

/// Throws DataError naming the dependent columns if x is rank deficient.
void check_full_rank(const Eigen::MatrixXd& x, const std::vector<std::string>& names);

enum class AugmentKind { GroupMeans, WithinProjection };

/// A dataset plus the bias-correction regressors built from it.
struct AugmentedDataset {
    GroupedDataset base;
    Eigen::MatrixXd aug_cols;
    AugmentKind kind = AugmentKind::GroupMeans;
    /// Indices (into base.x()) of the columns that were projected.
    std::vector<int> source_cols;

    /// base.x() with aug_cols appended; validated for full rank.
    GroupedDataset combined() const;
};

/// Group means of every non-intercept column, replicated within each group.
AugmentedDataset augment_group_means(const GroupedDataset& ds);

/// Within-group projection Z_g (Z_g'Z_g)^+ Z_g' X_g of the non-intercept
/// columns that are not themselves random-effect columns.
AugmentedDataset augment_projection(const GroupedDataset& ds);

/// Per-group coefficients of the projection, so the same map can be applied
/// to new rows: entry g is d x q with X~ row = z_row' * coef[g].
std::vector<Eigen::MatrixXd> projection_coefficients(const GroupedDataset& ds,
                                                     const std::vector<int>& source_cols);

/// Columns projected by augment_projection for this dataset.
std::vector<int> projection_source_columns(const GroupedDataset& ds);

}  // namespace grouped_glm
