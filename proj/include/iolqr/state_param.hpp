#pragma once

#include "iolqr/types.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace iolqr {

enum class ParamMode { Delayed, Filtered };

// Which substitute-state construction to run and its user-defined knobs.
//
// Delayed: the substitute state is the stacked window
// [u_{t-N}..u_{t-1}; y_{t-N}..y_{t-1}]; N defaults to the state dimension,
// which always dominates the observability index.
//
// Filtered: each input/output channel is passed through the n-dimensional
// companion-form filter of the user-chosen characteristic polynomial
//   Lambda(z) = z^n + a_{n-1} z^{n-1} + ... + a_0,
// and an autonomous error generator eta^eps_{t+1} = A_eps eta^eps_t rides
// along. The error block is retained downstream exactly when Lambda has a
// nonzero root.
struct ParamConfig {
    ParamMode mode = ParamMode::Delayed;
    Eigen::Index n = 0;   // plant state dimension (known or estimated)
    Eigen::Index N = 0;   // delayed window length; 0 means "use n"

    // Filtered-mode parameters.
    std::vector<double> lambda_coeffs;  // a_0 .. a_{n-1}
    MatrixXd eps_dynamics;              // A_eps; empty means companion form of Lambda
    VectorXd eta0_eps;                  // nonzero initial error-generator state
    bool keep_error_block = false;

    double rank_tol = -1.0;  // override for every rank decision downstream

    static ParamConfig delayed(Eigen::Index n, Eigen::Index N = 0);
    // Builds coefficients from roots, companion A_eps, and the indicator.
    static ParamConfig filtered(Eigen::Index n, const std::vector<double>& lambda_roots,
                                const VectorXd& eta0_eps);

    Eigen::Index window() const { return N > 0 ? N : n; }
    MatrixXd companion() const;  // companion matrix of Lambda
    void validate() const;
};

// Raw substitute-state matrices before projection. Column k of Z0 is the
// substitute state at time first_time + k; Z1 is shifted one step.
struct RawSubstitute {
    MatrixXd Z0, Z1;
    int first_time = 0;
};

// Projected, full-row-rank data matrices ready for the learning algorithms.
struct SubstituteData {
    MatrixXd Z0, Z1;           // raw substitute states (n_zeta x T)
    MatrixXd V0, V1;           // projected states (n_v x T)
    MatrixXd Pproj;            // n_zeta x n_v with Z0 = Pproj * V0 on the retained subspace
    MatrixXd U0, Y0;           // aligned input/output samples
    MatrixXd Psi0;             // [V0; U0]
    Eigen::Index n_v = 0, n_zeta = 0;
    std::vector<Eigen::Index> selected_output_rows;  // rows of the output block kept by projection

    double min_singular_psi0 = 0.0;
};

// Builds the delayed-window substitute states. The trajectory must start at
// t0 <= -N so every column has its N-step pre-window; columns begin at time
// t0 + N.
RawSubstitute build_delayed(const Trajectory& traj, Eigen::Index N);

// Runs the user-defined filter system over (u_t, y_t) from zero filter state
// and eta^eps_0 = cfg.eta0_eps; requires t0 == 0.
RawSubstitute build_filtered(const Trajectory& traj, const ParamConfig& cfg);

// Rank-n SVD truncation of the output-block rows, used to strip noise before
// projection. `basis` holds the retained left singular vectors so the shifted
// block can be truncated consistently.
struct DenoiseResult {
    MatrixXd truncated;
    MatrixXd basis;        // pn x n
    double sigma_ratio = 0.0;  // sigma_n / sigma_1
    bool weak_signal = false;  // sigma_n / sigma_1 below tolerance
};

DenoiseResult svd_denoise(const MatrixXd& Zy, Eigen::Index n, double weak_tol = 1e-10);

// Projects the substitute states onto a full-row-rank coordinate set: all
// input rows survive, n output rows are selected by column-pivoted QR run on
// the output block deflated against the surviving rows, and the error block
// is kept per cfg.keep_error_block. With denoise set, the output block of Z0
// and Z1 is SVD-truncated to rank n first.
SubstituteData project(const RawSubstitute& raw, const MatrixXd& U0, const MatrixXd& Y0,
                       const ParamConfig& cfg, bool denoise = false);

struct DimEstimate {
    std::vector<int> rank_curve;   // rank([H_N(u); H_N(y)]) - mN for N = 1..N_max
    std::optional<int> n_hat;      // plateau value, if one appeared
};

struct DimensionUndetermined : DataError {
    DimensionUndetermined(const std::string& what, std::vector<int> curve)
        : DataError(what), rank_curve(std::move(curve)) {}
    std::vector<int> rank_curve;
};

// Estimates the unknown state dimension by sweeping N and watching
// rank([H_N(u); H_N(y)]) - mN; the estimate is the first value repeated for
// two consecutive N. Throws DimensionUndetermined (carrying the curve) when
// no plateau shows up by N_max.
DimEstimate estimate_state_dim(const MatrixXd& U, const MatrixXd& Y, int N_max,
                               double rank_tol = -1.0);
DimEstimate estimate_state_dim_curve(const MatrixXd& U, const MatrixXd& Y, int N_max,
                                     double rank_tol = -1.0);

// JSON container with dimension metadata and column-major payloads.
std::string substitute_to_json(const SubstituteData& data);
SubstituteData substitute_from_json(const std::string& text);
void write_matrix_csv(const MatrixXd& M, std::ostream& os);

}  // namespace iolqr
