#pragma once

#include "iolqr/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>

namespace iolqr {

// Deterministic uniform double in [0, 1) from a mt19937_64 stream. All seeded
// draws in the library go through this helper so that a seed pins the entire
// experiment byte-for-byte.
inline double uniform01(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

inline double uniform_in(std::mt19937_64& gen, double lo, double hi) {
    return lo + (hi - lo) * uniform01(gen);
}

// Simulate x_{t+1} = A x_t + B u_t, y_t = C x_t for the T inputs in U.
// With a NoiseSpec the recursion becomes x_{t+1} = A x_t + B u_t + w_t,
// y_t = C x_t + e_t, with w, e uniform per entry in [-bound, bound]; the
// draw order is, for each step t: e_t entries, then w_t entries. Realized
// disturbances are stored in the returned trajectory.
Trajectory simulate(const LtiSystem& sys, const VectorXd& x0, const MatrixXd& U,
                    const std::optional<NoiseSpec>& noise = std::nullopt, int t0 = 0);

// Sum-of-sinusoids excitation: channel ch of the result is
//   u_t = sum_{i=1}^{num_terms} c_i sin(a_i t + b_i)
// with a_i, b_i uniform on (0, 2*pi) and c_i uniform on (0, 1). Draws come
// from one mt19937_64 stream seeded with `seed`, ordered (a_i, b_i, c_i) per
// term, channel by channel.
MatrixXd generate_pe_input(Eigen::Index m, Eigen::Index T, int num_terms, std::uint64_t seed);

// Depth-N block Hankel matrix of a q x T sample sequence: column j stacks
// samples j .. j+N-1 (time-major, so row k*q + i is channel i at offset k).
MatrixXd hankel(const MatrixXd& seq, Eigen::Index depth);

struct PeCheck {
    bool is_pe = false;
    double min_singular_value = 0.0;
    std::string reason;
};

// Persistency of excitation of order N: the depth-N Hankel matrix has full
// row rank. Sequences shorter than (m+1)N - 1 cannot satisfy it and are
// reported as not PE with a reason instead of an error.
PeCheck check_pe(const MatrixXd& seq, Eigen::Index order, double rank_tol = -1.0);

struct StateData {
    MatrixXd X0, U0, X1, Y0;
};

// Splits a simulated trajectory into the shifted data matrices
// (X0, U0, X1, Y0) with X1 = A X0 + B U0 exact in noise-free mode.
StateData build_state_data(const Trajectory& traj);

// --- serialization ---------------------------------------------------------

// CSV layout: header "t,u_1..u_m,y_1..y_p", one row per time step, values at
// 17 significant digits, so the round trip is lossless. State samples are not
// part of the CSV format.
void write_trajectory_csv(const Trajectory& traj, std::ostream& os);
Trajectory read_trajectory_csv(std::istream& is);

std::string trajectory_to_json(const Trajectory& traj);
Trajectory trajectory_from_json(const std::string& text);

}  // namespace iolqr
