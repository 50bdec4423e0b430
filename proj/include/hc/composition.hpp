#pragma once

#include "hc/common.hpp"
#include "hc/runtime.hpp"

#include <map>
#include <mutex>
#include <string>
#include <vector>

namespace hc::compose {

enum class MatrixKind { QK, OV };
enum class CompositionKind { Query, Key, Value };

std::string to_string(CompositionKind k);
CompositionKind composition_kind_from_string(const std::string& s);

// A head's d x d interaction matrix. When built from head weights the
// low-rank factors are kept alongside (matrix = left_factor * right_factor),
// which the SVD exploits.
struct HeadMatrix {
    MatrixKind kind;
    int layer = -1;
    int head = -1;
    MatrixF matrix;  // d x d
    bool ln_folded = false;
    MatrixF left_factor;   // d x d_head when present
    MatrixF right_factor;  // d_head x d when present
    // How many SVD triplets to retain; builders set d_head, 0 keeps all.
    int rank_budget = 0;

    bool has_factors() const { return left_factor.size() > 0; }
};

// Thin SVD of a head matrix, top d_head triplets, sign-normalized: each right
// singular vector's largest-magnitude entry is positive (ties break to the
// lowest index), with the left vector flipped to compensate.
struct SvdFactors {
    MatrixF left;   // d x h, column-orthonormal
    VectorF sigma;  // h, descending, non-negative
    MatrixF right;  // d x h, column-orthonormal
    // Components whose singular value ties its neighbor within 1e-6 relative;
    // their indices are basis-dependent.
    std::vector<bool> unstable;
};

// L.H.C addressing, e.g. "8.6.2" = layer 8, head 6, component 2.
struct ComponentRef {
    int layer = -1;
    int head = -1;
    int index = -1;

    std::string str() const;
    static ComponentRef parse(const std::string& s);
    auto operator<=>(const ComponentRef&) const = default;
};

struct CompositionReport {
    ComponentRef source;  // index = -1: the report covers all 64 components
    int target_layer = -1;
    int target_head = -1;
    // >= 0 when the target is a single rank-1 component of that head.
    int target_component = -1;
    CompositionKind kind = CompositionKind::Query;
    bool ln_folded = false;

    double full_score = 0;               // CS(full source OV, target matrix)
    std::vector<double> component_scores;  // one per component
    double mean = 0;
    double stddev = 0;                   // population, over all components
    std::vector<double> z_scores;
    // Outlier-robust z: the null mean/std come from 3-sigma clipping iterated
    // to convergence, so joint outliers do not deflate each other.
    double null_mean = 0;
    double null_std = 0;
    std::vector<double> robust_z;
    std::vector<bool> unstable;

    // Indices with robust z >= threshold, descending by score.
    std::vector<int> outliers(double z_threshold = 5.0) const;
    int top_component() const;

    std::string to_json() const;
    static CompositionReport from_json(const std::string& text);
};

// Mean/std of the clipped null plus per-score z values against it.
struct RobustZ {
    double mean = 0;
    double stddev = 0;
    std::vector<double> z;
};
RobustZ sigma_clipped_z(const std::vector<double>& scores, double clip = 3.0);

// d x d map applied to a residual row passing through the head's
// value-then-output path; fold_ln multiplies the pre-attention LN gain into
// the read side.
HeadMatrix build_ov(const runtime::ModelView& model, int layer, int head, bool fold_ln = false);

// Bilinear form between query and key residuals (1/sqrt(d_head) excluded).
HeadMatrix build_qk(const runtime::ModelView& model, int layer, int head, bool fold_ln = false);

// ||W1 W2||_F / (||W1||_F ||W2||_F). Throws on a zero matrix.
double composition_score(const MatrixF& w1, const MatrixF& w2);

SvdFactors svd(const HeadMatrix& hm);

// sigma_i * left_i (x) right_i, rank exactly 1.
MatrixF component_matrix(const SvdFactors& f, int index);

// Unit residual-stream directions: a rank-1 component writes along
// write_direction (right singular vector, row-vector convention) and reads
// along read_direction (left singular vector).
RowVectorF write_direction(const SvdFactors& f, int index);
RowVectorF read_direction(const SvdFactors& f, int index);

enum class DecomposedSide { Source, Target };

// Per-component composition scores of source head's OV against the target
// head's matrix for the given composition kind (query: QK, key: QK^T,
// value: OV).
CompositionReport component_scores(const runtime::ModelView& model, int source_layer,
                                   int source_head, int target_layer, int target_head,
                                   CompositionKind kind,
                                   DecomposedSide side = DecomposedSide::Source,
                                   bool fold_ln = false);

// Same, but against a single rank-1 component of the target head's OV
// (channels are located against the specific component they feed).
CompositionReport component_scores_vs_component(const runtime::ModelView& model,
                                                int source_layer, int source_head,
                                                const ComponentRef& target,
                                                bool fold_ln = false);

// z-scores of one source head's per-component scores against the pooled scan
// null: the score distribution of every component of every head in layers
// [0, target_layer) composing with the same target. This is the outlier
// statistic for channel discovery, where a single head's 64 scores are too
// few (and too contaminated) to estimate the null.
struct ScanZ {
    double pool_mean = 0;
    double pool_std = 0;
    size_t pool_size = 0;
    std::vector<double> z;  // per component of the source head
};
ScanZ scan_zscores(const runtime::ModelView& model, int source_layer, int source_head,
                   int target_layer, int target_head, CompositionKind kind,
                   bool fold_ln = false);

enum class ScanDirection { Upstream, Downstream };

struct ScanResult {
    int layer, head;
    double score;
};

// Ranks heads by how strongly they compose with one component: upstream
// scores CS(OV_h, component), downstream scores CS(component, target matrix
// of kind) over later layers. Descending by score.
std::vector<ScanResult> scan_channel(const runtime::ModelView& model, const ComponentRef& ref,
                                     ScanDirection direction, CompositionKind kind,
                                     bool fold_ln = false);

// Memoizes SVDs per (kind, layer, head, fold) for one model. Thread-safe.
class ChannelCache {
  public:
    explicit ChannelCache(runtime::ModelView model) : model_(model) {}

    const SvdFactors& factors(MatrixKind kind, int layer, int head, bool fold_ln = false);
    const SvdFactors& factors(const ComponentRef& ref, bool fold_ln = false) {
        return factors(MatrixKind::OV, ref.layer, ref.head, fold_ln);
    }
    RowVectorF write_dir(const ComponentRef& ref, bool fold_ln = false);
    const runtime::ModelView& model() const { return model_; }

  private:
    runtime::ModelView model_;
    std::map<std::tuple<int, int, int, bool>, SvdFactors> cache_;
    std::mutex mu_;
};

}  // namespace hc::compose
