#include "iolqr/lti.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

namespace iolqr {

namespace {

std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

nlohmann::json matrix_to_json(const MatrixXd& M) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.size();
    if (rows == 0) return MatrixXd(0, 0);
    const auto cols = j.at(0).size();
    MatrixXd M(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t k = 0; k < cols; ++k) M(i, k) = j.at(i).at(k).get<double>();
    return M;
}

}  // namespace

Trajectory simulate(const LtiSystem& sys, const VectorXd& x0, const MatrixXd& U,
                    const std::optional<NoiseSpec>& noise, int t0) {
    sys.validate();
    if (x0.size() != sys.n()) throw ShapeError("simulate: x0 must have n entries");
    if (U.rows() != sys.m()) throw ShapeError("simulate: U must have m rows");
    if (noise) noise->validate();

    const Eigen::Index n = sys.n(), p = sys.p(), T = U.cols();
    Trajectory traj;
    traj.t0 = t0;
    traj.U = U;
    traj.Y.resize(p, T);
    MatrixXd X(n, T + 1);
    X.col(0) = x0;

    const bool noisy = noise.has_value();
    std::mt19937_64 gen(noisy ? noise->seed : 0);
    MatrixXd W, E;
    if (noisy) {
        W = MatrixXd::Zero(n, T);
        E = MatrixXd::Zero(p, T);
    }

    for (Eigen::Index t = 0; t < T; ++t) {
        traj.Y.col(t) = sys.C * X.col(t);
        if (noisy) {
            for (Eigen::Index i = 0; i < p; ++i)
                E(i, t) = uniform_in(gen, -noise->e_max, noise->e_max);
            for (Eigen::Index i = 0; i < n; ++i)
                W(i, t) = uniform_in(gen, -noise->w_max, noise->w_max);
            traj.Y.col(t) += E.col(t);
        }
        X.col(t + 1) = sys.A * X.col(t) + sys.B * U.col(t);
        if (noisy) X.col(t + 1) += W.col(t);
    }
    traj.X = std::move(X);
    if (noisy) {
        traj.W = std::move(W);
        traj.E = std::move(E);
    }
    return traj;
}

MatrixXd generate_pe_input(Eigen::Index m, Eigen::Index T, int num_terms, std::uint64_t seed) {
    if (m < 1) throw ConfigError("generate_pe_input: m must be positive");
    if (T < 1) throw ConfigError("generate_pe_input: T must be positive");
    if (num_terms < 1) throw ConfigError("generate_pe_input: num_terms must be positive");

    constexpr double two_pi = 2.0 * std::numbers::pi;
    std::mt19937_64 gen(seed);
    MatrixXd U = MatrixXd::Zero(m, T);
    for (Eigen::Index ch = 0; ch < m; ++ch) {
        for (int i = 0; i < num_terms; ++i) {
            const double a = uniform_in(gen, 0.0, two_pi);
            const double b = uniform_in(gen, 0.0, two_pi);
            const double c = uniform01(gen);
            for (Eigen::Index t = 0; t < T; ++t)
                U(ch, t) += c * std::sin(a * static_cast<double>(t) + b);
        }
    }
    return U;
}

MatrixXd hankel(const MatrixXd& seq, Eigen::Index depth) {
    const Eigen::Index q = seq.rows(), T = seq.cols();
    if (depth < 1) throw ShapeError("hankel: depth must be positive");
    if (depth >= T) throw ShapeError("hankel: depth must be less than the sample count");
    const Eigen::Index cols = T - depth + 1;
    MatrixXd H(q * depth, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index k = 0; k < depth; ++k) H.block(k * q, j, q, 1) = seq.col(j + k);
    return H;
}

PeCheck check_pe(const MatrixXd& seq, Eigen::Index order, double rank_tol) {
    const Eigen::Index m = seq.rows(), T = seq.cols();
    PeCheck out;
    if (T < (m + 1) * order - 1) {
        out.reason = "sequence too short: T >= (m+1)N-1 required for PE of order N";
        return out;
    }
    const MatrixXd H = hankel(seq, order);
    Eigen::JacobiSVD<MatrixXd> svd(H);
    const VectorXd& sv = svd.singularValues();
    out.min_singular_value = sv(sv.size() - 1);
    const double tol = rank_tol > 0.0 ? rank_tol : rank_tolerance(H, sv(0));
    Eigen::Index r = 0;
    while (r < sv.size() && sv(r) > tol) ++r;
    out.is_pe = (r == H.rows());
    if (!out.is_pe) out.reason = "Hankel matrix is row-rank deficient";
    return out;
}

StateData build_state_data(const Trajectory& traj) {
    traj.validate();
    if (!traj.X) throw DataError("build_state_data: trajectory carries no state samples");
    const Eigen::Index T = traj.samples();
    StateData d;
    d.X0 = traj.X->leftCols(T);
    d.X1 = traj.X->rightCols(T);
    d.U0 = traj.U;
    d.Y0 = traj.Y;
    return d;
}

void write_trajectory_csv(const Trajectory& traj, std::ostream& os) {
    const Eigen::Index m = traj.U.rows(), p = traj.Y.rows(), T = traj.samples();
    os << "t";
    for (Eigen::Index i = 1; i <= m; ++i) os << ",u_" << i;
    for (Eigen::Index i = 1; i <= p; ++i) os << ",y_" << i;
    os << "\n";
    for (Eigen::Index t = 0; t < T; ++t) {
        os << traj.t0 + static_cast<int>(t);
        for (Eigen::Index i = 0; i < m; ++i) os << "," << fmt17(traj.U(i, t));
        for (Eigen::Index i = 0; i < p; ++i) os << "," << fmt17(traj.Y(i, t));
        os << "\n";
    }
}

Trajectory read_trajectory_csv(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw DataError("trajectory csv: empty stream");
    Eigen::Index m = 0, p = 0;
    {
        std::stringstream hs(header);
        std::string field;
        while (std::getline(hs, field, ',')) {
            if (field.rfind("u_", 0) == 0) ++m;
            if (field.rfind("y_", 0) == 0) ++p;
        }
    }
    if (m == 0 && p == 0) throw DataError("trajectory csv: malformed header");
    std::vector<std::vector<double>> rows;
    int t0 = 0;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string field;
        std::vector<double> vals;
        while (std::getline(ls, field, ',')) vals.push_back(std::stod(field));
        if (static_cast<Eigen::Index>(vals.size()) != 1 + m + p)
            throw DataError("trajectory csv: wrong field count");
        if (rows.empty()) t0 = static_cast<int>(vals[0]);
        rows.push_back(std::move(vals));
    }
    Trajectory traj;
    traj.t0 = t0;
    const Eigen::Index T = static_cast<Eigen::Index>(rows.size());
    traj.U.resize(m, T);
    traj.Y.resize(p, T);
    for (Eigen::Index t = 0; t < T; ++t) {
        for (Eigen::Index i = 0; i < m; ++i) traj.U(i, t) = rows[t][1 + i];
        for (Eigen::Index i = 0; i < p; ++i) traj.Y(i, t) = rows[t][1 + m + i];
    }
    return traj;
}

std::string trajectory_to_json(const Trajectory& traj) {
    nlohmann::json j;
    j["m"] = traj.U.rows();
    j["p"] = traj.Y.rows();
    j["samples"] = traj.samples();
    j["t0"] = traj.t0;
    j["U"] = matrix_to_json(traj.U);
    j["Y"] = matrix_to_json(traj.Y);
    if (traj.X) j["X"] = matrix_to_json(*traj.X);
    if (traj.W) j["W"] = matrix_to_json(*traj.W);
    if (traj.E) j["E"] = matrix_to_json(*traj.E);
    return j.dump();
}

Trajectory trajectory_from_json(const std::string& text) {
    const nlohmann::json j = nlohmann::json::parse(text);
    Trajectory traj;
    traj.t0 = j.at("t0").get<int>();
    traj.U = matrix_from_json(j.at("U"));
    traj.Y = matrix_from_json(j.at("Y"));
    if (j.contains("X")) traj.X = matrix_from_json(j.at("X"));
    if (j.contains("W")) traj.W = matrix_from_json(j.at("W"));
    if (j.contains("E")) traj.E = matrix_from_json(j.at("E"));
    traj.validate();
    return traj;
}

}  // namespace iolqr
