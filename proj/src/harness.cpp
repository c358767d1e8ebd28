#include "iaekf/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "iaekf/covariance.hpp"
#include "iaekf/csv.hpp"
#include "iaekf/svg.hpp"

namespace iaekf {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Experiment e) {
    switch (e) {
        case Experiment::GainCompare:
            return "gain-compare";
        case Experiment::ConvergenceMc:
            return "convergence-mc";
        case Experiment::CovarianceMc:
            return "covariance-mc";
        case Experiment::SingleRun:
            return "single-run";
    }
    return "unknown";
}

Experiment experiment_from_string(const std::string& s) {
    for (Experiment e : {Experiment::GainCompare, Experiment::ConvergenceMc, Experiment::CovarianceMc,
                         Experiment::SingleRun}) {
        if (to_string(e) == s) return e;
    }
    throw ConfigError("unknown experiment '" + s +
                      "' (expected gain-compare, convergence-mc, covariance-mc or single-run)");
}

ExperimentConfig ExperimentConfig::defaults(Experiment e) {
    ExperimentConfig cfg;
    cfg.experiment = e;
    cfg.noise_true = NoiseSpec::isotropic(1e-1, 1e-5);
    if (e == Experiment::CovarianceMc) {
        cfg.noise_true.sigma_eta = Vec3(0.75, 1.5, 1.0).asDiagonal() * 1e-1;
        cfg.noise_true.sigma_a = Vec3(1.0, 2.0, 3.0).asDiagonal() * 1e-5;
        cfg.noise_true.sigma_m = Vec3(3.0, 3.5, 6.0).asDiagonal() * 1e-5;
        cfg.init_scale_eta = 400.0;
        cfg.init_scale_nu = 200.0;
        cfg.estimate_sigma0 = Mat3::Identity() * 1e-4;
    }
    if (e == Experiment::GainCompare || e == Experiment::SingleRun) {
        cfg.mc_runs = 1;
    }
    return cfg;
}

void ExperimentConfig::validate() const {
    auto bad = [](const std::string& field, const std::string& msg) {
        throw ConfigError("field '" + field + "': " + msg);
    };
    try {
        trajectory.validate();
        world.validate();
        noise_true.validate();
        require_spd(estimate_sigma0, "estimate.sigma0");
        require_spd(initial_error_cov, "initial_error_cov", true);
        if (init_explicit) {
            require_spd(init_sigma_eta, "noise_init.sigma_eta");
            require_spd(init_sigma_nu, "noise_init.sigma_nu");
        }
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    } catch (const InvalidCovariance& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    if (!init_explicit && !(init_scale_eta > 0.0 && std::isfinite(init_scale_eta))) {
        bad("noise_init.scale_eta", "must be positive");
    }
    if (!init_explicit && !(init_scale_nu > 0.0 && std::isfinite(init_scale_nu))) {
        bad("noise_init.scale_nu", "must be positive");
    }
    if (mc_runs < 1) bad("mc_runs", "must be >= 1");
    if (experiment == Experiment::CovarianceMc && window_lengths.empty()) {
        bad("window_lengths", "must be non-empty for covariance-mc");
    }
    for (int w : window_lengths) {
        if (w < 2) bad("window_lengths", "each window must be >= 2, got " + std::to_string(w));
        if (experiment == Experiment::CovarianceMc && w > trajectory.n_steps) {
            bad("window_lengths", "each window must lie in [2, trajectory.n_steps], got " + std::to_string(w));
        }
    }
    if (burn_in < 0) bad("burn_in", "must be >= 0");
    if (experiment == Experiment::GainCompare && burn_in >= trajectory.n_steps) {
        bad("burn_in", "must lie in [0, trajectory.n_steps)");
    }
    if (threads < 0) bad("threads", "must be >= 0");
    if (em.max_iter < 1) bad("em.max_iter", "must be >= 1");
    if (!(em.tol_G >= 0.0)) bad("em.tol_G", "must be >= 0");
    if (!(em.tol_theta >= 0.0)) bad("em.tol_theta", "must be >= 0");
    if (output_dir.empty()) bad("output_dir", "must be non-empty");
}

NoiseParams ExperimentConfig::theta0() const {
    NoiseParams th;
    th.sigma0 = estimate_sigma0;
    if (init_explicit) {
        th.sigma_eta = init_sigma_eta;
        th.sigma_nu = init_sigma_nu;
    } else {
        th.sigma_eta = noise_true.sigma_eta * init_scale_eta;
        th.sigma_nu = noise_true.sigma_nu() * init_scale_nu;
    }
    return th;
}

// ---------------------------------------------------------------------------
// Config serialization

namespace {

template <typename Derived>
json vec_json(const Eigen::MatrixBase<Derived>& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

template <typename Derived>
json mat_json(const Eigen::MatrixBase<Derived>& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vec_json(m.row(i).transpose()));
    return a;
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

[[noreturn]] void field_error(const std::string& path, const std::string& msg) {
    throw ConfigError("field '" + path + "': " + msg);
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& path) {
    if (!obj.is_object()) field_error(path.empty() ? "<root>" : path, "expected an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; });
        if (!known) field_error(join(path, it.key()), "unknown key");
    }
}

double read_number(const json& v, const std::string& path) {
    if (!v.is_number()) field_error(path, "expected a number");
    return v.get<double>();
}

int read_int(const json& v, const std::string& path) {
    if (!v.is_number_integer()) field_error(path, "expected an integer");
    const auto x = v.get<long long>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
        field_error(path, "integer out of range");
    }
    return static_cast<int>(x);
}

std::uint64_t read_u64(const json& v, const std::string& path) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::uint64_t>(v.get<long long>());
    field_error(path, "expected a non-negative integer");
}

std::string read_string(const json& v, const std::string& path) {
    if (!v.is_string()) field_error(path, "expected a string");
    return v.get<std::string>();
}

template <int N>
Eigen::Matrix<double, N, 1> read_vec(const json& v, const std::string& path) {
    if (!v.is_array() || v.size() != N) field_error(path, "expected an array of " + std::to_string(N) + " numbers");
    Eigen::Matrix<double, N, 1> out;
    for (int i = 0; i < N; ++i) out(i) = read_number(v[i], path + "[" + std::to_string(i) + "]");
    return out;
}

/// Nested N x N array, {"diag": [N numbers]}, or a scalar s meaning s I.
template <int N>
Eigen::Matrix<double, N, N> read_mat(const json& v, const std::string& path) {
    using M = Eigen::Matrix<double, N, N>;
    if (v.is_number()) return M::Identity() * v.get<double>();
    if (v.is_object()) {
        check_keys(v, {"diag"}, path);
        if (!v.contains("diag")) field_error(path, "expected key 'diag'");
        return read_vec<N>(v["diag"], join(path, "diag")).asDiagonal();
    }
    if (!v.is_array() || v.size() != N) {
        field_error(path, "expected a " + std::to_string(N) + "x" + std::to_string(N) +
                              " nested array, {\"diag\": [...]}, or a scalar");
    }
    M out;
    for (int i = 0; i < N; ++i) out.row(i) = read_vec<N>(v[i], path + "[" + std::to_string(i) + "]").transpose();
    return out;
}

Quaternion read_quat(const json& v, const std::string& path) {
    try {
        return Quaternion(read_vec<4>(v, path));
    } catch (const InvalidArgument& e) {
        field_error(path, e.what());
    }
}

std::string profile_name(OmegaProfileKind k) {
    switch (k) {
        case OmegaProfileKind::Constant:
            return "constant";
        case OmegaProfileKind::Sinusoidal:
            return "sinusoidal";
        case OmegaProfileKind::RandomWalk:
            return "random-walk";
    }
    return "unknown";
}

OmegaProfileKind profile_kind(const std::string& s, const std::string& path) {
    for (auto k : {OmegaProfileKind::Constant, OmegaProfileKind::Sinusoidal, OmegaProfileKind::RandomWalk}) {
        if (profile_name(k) == s) return k;
    }
    field_error(path, "unknown profile '" + s + "' (expected constant, sinusoidal or random-walk)");
}

std::string eta_update_name(SigmaEtaUpdate u) {
    return u == SigmaEtaUpdate::Regression ? "regression" : "known-transition";
}

}  // namespace

json to_json(const ExperimentConfig& cfg) {
    const TrajectoryConfig& t = cfg.trajectory;
    json doc;
    doc["experiment"] = to_string(cfg.experiment);
    doc["seed"] = cfg.seed;
    doc["output_dir"] = cfg.output_dir;
    doc["mc_runs"] = cfg.mc_runs;
    doc["window_lengths"] = cfg.window_lengths;
    doc["threads"] = cfg.threads;
    doc["burn_in"] = cfg.burn_in;
    doc["trajectory"] = {
        {"dt", t.dt},
        {"n_steps", t.n_steps},
        {"q0", vec_json(t.q0.coeffs())},
        {"q0_tangent_cov", mat_json(t.q0_tangent_cov)},
        {"profile",
         {{"kind", profile_name(t.profile.kind)},
          {"constant", vec_json(t.profile.constant)},
          {"amplitude", vec_json(t.profile.amplitude)},
          {"frequency", vec_json(t.profile.frequency)},
          {"phase", vec_json(t.profile.phase)},
          {"segment_steps", t.profile.segment_steps},
          {"step_std", t.profile.step_std}}},
    };
    doc["world"] = {{"g", vec_json(cfg.world.g)}, {"b", vec_json(cfg.world.b)}};
    doc["noise_true"] = {{"sigma_eta", mat_json(cfg.noise_true.sigma_eta)},
                         {"sigma_a", mat_json(cfg.noise_true.sigma_a)},
                         {"sigma_m", mat_json(cfg.noise_true.sigma_m)}};
    if (cfg.init_explicit) {
        doc["noise_init"] = {{"sigma_eta", mat_json(cfg.init_sigma_eta)}, {"sigma_nu", mat_json(cfg.init_sigma_nu)}};
    } else {
        doc["noise_init"] = {{"scale_eta", cfg.init_scale_eta}, {"scale_nu", cfg.init_scale_nu}};
    }
    doc["estimate"] = {{"q0", vec_json(cfg.estimate_q0.coeffs())}, {"sigma0", mat_json(cfg.estimate_sigma0)}};
    doc["initial_error_cov"] = mat_json(cfg.initial_error_cov);
    doc["em"] = {{"max_iter", cfg.em.max_iter},
                 {"tol_G", cfg.em.tol_G},
                 {"tol_theta", cfg.em.tol_theta},
                 {"sigma_eta_update", eta_update_name(cfg.em.eta_update)}};
    return doc;
}

ExperimentConfig config_from_json(const json& doc, Experiment fallback) {
    check_keys(doc,
               {"experiment", "seed", "output_dir", "mc_runs", "window_lengths", "threads", "burn_in", "trajectory",
                "world", "noise_true", "noise_init", "estimate", "initial_error_cov", "em"},
               "");
    Experiment e = fallback;
    if (doc.contains("experiment")) {
        try {
            e = experiment_from_string(read_string(doc["experiment"], "experiment"));
        } catch (const ConfigError& err) {
            field_error("experiment", err.what());
        }
    }
    ExperimentConfig cfg = ExperimentConfig::defaults(e);
    if (doc.contains("seed")) cfg.seed = read_u64(doc["seed"], "seed");
    if (doc.contains("output_dir")) cfg.output_dir = read_string(doc["output_dir"], "output_dir");
    if (doc.contains("mc_runs")) cfg.mc_runs = read_int(doc["mc_runs"], "mc_runs");
    if (doc.contains("threads")) cfg.threads = read_int(doc["threads"], "threads");
    if (doc.contains("burn_in")) cfg.burn_in = read_int(doc["burn_in"], "burn_in");
    if (doc.contains("window_lengths")) {
        const json& w = doc["window_lengths"];
        if (!w.is_array()) field_error("window_lengths", "expected an array of integers");
        cfg.window_lengths.clear();
        for (std::size_t i = 0; i < w.size(); ++i) {
            cfg.window_lengths.push_back(read_int(w[i], "window_lengths[" + std::to_string(i) + "]"));
        }
    }
    if (doc.contains("trajectory")) {
        const json& t = doc["trajectory"];
        check_keys(t, {"dt", "n_steps", "q0", "q0_tangent_cov", "profile"}, "trajectory");
        TrajectoryConfig& tc = cfg.trajectory;
        if (t.contains("dt")) tc.dt = read_number(t["dt"], "trajectory.dt");
        if (t.contains("n_steps")) tc.n_steps = read_int(t["n_steps"], "trajectory.n_steps");
        if (t.contains("q0")) tc.q0 = read_quat(t["q0"], "trajectory.q0");
        if (t.contains("q0_tangent_cov")) tc.q0_tangent_cov = read_mat<3>(t["q0_tangent_cov"], "trajectory.q0_tangent_cov");
        if (t.contains("profile")) {
            const json& p = t["profile"];
            const std::string base = "trajectory.profile";
            check_keys(p, {"kind", "constant", "amplitude", "frequency", "phase", "segment_steps", "step_std"}, base);
            OmegaProfile& op = tc.profile;
            if (p.contains("kind")) op.kind = profile_kind(read_string(p["kind"], base + ".kind"), base + ".kind");
            if (p.contains("constant")) op.constant = read_vec<3>(p["constant"], base + ".constant");
            if (p.contains("amplitude")) op.amplitude = read_vec<3>(p["amplitude"], base + ".amplitude");
            if (p.contains("frequency")) op.frequency = read_vec<3>(p["frequency"], base + ".frequency");
            if (p.contains("phase")) op.phase = read_vec<3>(p["phase"], base + ".phase");
            if (p.contains("segment_steps")) op.segment_steps = read_int(p["segment_steps"], base + ".segment_steps");
            if (p.contains("step_std")) op.step_std = read_number(p["step_std"], base + ".step_std");
        }
    }
    if (doc.contains("world")) {
        const json& w = doc["world"];
        check_keys(w, {"g", "b"}, "world");
        if (w.contains("g")) cfg.world.g = read_vec<3>(w["g"], "world.g");
        if (w.contains("b")) cfg.world.b = read_vec<3>(w["b"], "world.b");
    }
    if (doc.contains("noise_true")) {
        const json& n = doc["noise_true"];
        check_keys(n, {"sigma_eta", "sigma_a", "sigma_m"}, "noise_true");
        if (n.contains("sigma_eta")) cfg.noise_true.sigma_eta = read_mat<3>(n["sigma_eta"], "noise_true.sigma_eta");
        if (n.contains("sigma_a")) cfg.noise_true.sigma_a = read_mat<3>(n["sigma_a"], "noise_true.sigma_a");
        if (n.contains("sigma_m")) cfg.noise_true.sigma_m = read_mat<3>(n["sigma_m"], "noise_true.sigma_m");
    }
    if (doc.contains("noise_init")) {
        const json& n = doc["noise_init"];
        check_keys(n, {"scale_eta", "scale_nu", "sigma_eta", "sigma_nu"}, "noise_init");
        const bool scaled = n.contains("scale_eta") || n.contains("scale_nu");
        const bool explicit_blocks = n.contains("sigma_eta") || n.contains("sigma_nu");
        if (scaled && explicit_blocks) field_error("noise_init", "give either scale_eta/scale_nu or sigma_eta/sigma_nu");
        if (explicit_blocks) {
            if (!n.contains("sigma_eta") || !n.contains("sigma_nu")) {
                field_error("noise_init", "explicit form needs both sigma_eta and sigma_nu");
            }
            cfg.init_explicit = true;
            cfg.init_sigma_eta = read_mat<3>(n["sigma_eta"], "noise_init.sigma_eta");
            cfg.init_sigma_nu = read_mat<6>(n["sigma_nu"], "noise_init.sigma_nu");
        } else {
            cfg.init_explicit = false;
            if (n.contains("scale_eta")) cfg.init_scale_eta = read_number(n["scale_eta"], "noise_init.scale_eta");
            if (n.contains("scale_nu")) cfg.init_scale_nu = read_number(n["scale_nu"], "noise_init.scale_nu");
        }
    }
    if (doc.contains("estimate")) {
        const json& s = doc["estimate"];
        check_keys(s, {"q0", "sigma0"}, "estimate");
        if (s.contains("q0")) cfg.estimate_q0 = read_quat(s["q0"], "estimate.q0");
        if (s.contains("sigma0")) cfg.estimate_sigma0 = read_mat<3>(s["sigma0"], "estimate.sigma0");
    }
    if (doc.contains("initial_error_cov")) {
        cfg.initial_error_cov = read_mat<3>(doc["initial_error_cov"], "initial_error_cov");
    }
    if (doc.contains("em")) {
        const json& m = doc["em"];
        check_keys(m, {"max_iter", "tol_G", "tol_theta", "sigma_eta_update"}, "em");
        if (m.contains("max_iter")) cfg.em.max_iter = read_int(m["max_iter"], "em.max_iter");
        if (m.contains("tol_G")) cfg.em.tol_G = read_number(m["tol_G"], "em.tol_G");
        if (m.contains("tol_theta")) cfg.em.tol_theta = read_number(m["tol_theta"], "em.tol_theta");
        if (m.contains("sigma_eta_update")) {
            const std::string u = read_string(m["sigma_eta_update"], "em.sigma_eta_update");
            if (u == "known-transition") {
                cfg.em.eta_update = SigmaEtaUpdate::KnownTransition;
            } else if (u == "regression") {
                cfg.em.eta_update = SigmaEtaUpdate::Regression;
            } else {
                field_error("em.sigma_eta_update", "expected known-transition or regression");
            }
        }
    }
    return cfg;
}

ExperimentConfig load_config(const fs::path& path, Experiment fallback) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        std::string what = e.what();
        if (const auto pos = what.find("syntax error"); pos != std::string::npos) what = what.substr(pos);
        throw ConfigError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + what);
    }
    try {
        return config_from_json(doc, fallback);
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Parallelism

unsigned resolve_threads(int requested) {
    if (requested > 0) return static_cast<unsigned>(requested);
    if (const char* env = std::getenv("IAEKF_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& fn) {
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), count));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < count; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = count;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Sliding-window adaptation

AdaptiveResult run_adaptive(std::span<const SensorSample> samples, const NoiseParams& theta0,
                            const WorldConstants& world, const Quaternion& q_ref, double dt, std::size_t window,
                            const EmOptions& opts) {
    if (window < 2) throw InvalidArgument("run_adaptive: window must be >= 2");
    if (samples.size() < window) throw InvalidArgument("run_adaptive: fewer samples than one window");
    AdaptiveResult out;
    NoiseParams theta = theta0;
    Quaternion q = q_ref;
    for (std::size_t start = 0; start + window <= samples.size(); start += window) {
        const auto win = samples.subspan(start, window);
        AdaptiveWindow w{start, em_fit(win, theta, world, q, dt, opts), q};
        NoiseParams next = w.report.theta();
        const FilterState init{quat_mul(exp_map(Vec3(next.mu0 / 2.0)), q), next.sigma0, 0};
        const auto records = riekf_run(win, init, next, world, dt);
        q = records.back().q_post;
        next.mu0.setZero();
        next.sigma0 = records.back().P_post;
        theta = next;
        out.windows.push_back(std::move(w));
    }
    out.theta = theta;
    return out;
}

// ---------------------------------------------------------------------------
// Statistics

double quantile(std::vector<double> v, double p) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const double pos = std::clamp(p, 0.0, 1.0) * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

double iqr(const std::vector<double>& v) { return quantile(v, 0.75) - quantile(v, 0.25); }

// ---------------------------------------------------------------------------
// Studies

namespace {

std::vector<double> error_norms(const Trajectory& tr, const Quaternion& q0_hat, const std::vector<StepRecord>& recs) {
    std::vector<double> out;
    out.reserve(recs.size() + 1);
    out.push_back(attitude_error(tr.truth[0], q0_hat).norm());
    for (std::size_t k = 1; k <= recs.size(); ++k) out.push_back(attitude_error(tr.truth[k], recs[k - 1].q_post).norm());
    return out;
}

}  // namespace

double gain_variation(const std::vector<Mat36>& gains, int burn_in) {
    if (burn_in < 0 || static_cast<std::size_t>(burn_in) >= gains.size()) return 0.0;
    Mat36 lo = gains[burn_in];
    Mat36 hi = gains[burn_in];
    for (std::size_t i = burn_in; i < gains.size(); ++i) {
        lo = lo.cwiseMin(gains[i]);
        hi = hi.cwiseMax(gains[i]);
    }
    return (hi - lo).maxCoeff();
}

GainCompareResult run_gain_compare(const ExperimentConfig& cfg) {
    cfg.validate();
    TrajectoryConfig tc = cfg.trajectory;
    tc.seed = derive_seed(cfg.seed, 0);
    const Trajectory tr = generate_trajectory(tc, cfg.world, cfg.noise_true);
    const FilterState init{cfg.estimate_q0, cfg.estimate_sigma0, 0};
    const NoiseParams params = NoiseParams::from_spec(cfg.noise_true, cfg.estimate_sigma0);
    const auto ri = riekf_run(tr.samples, init, params, cfg.world, tr.dt);
    const auto li = liekf_run(tr.samples, init, params, cfg.world, tr.dt);
    GainCompareResult res;
    res.seed = tc.seed;
    for (const auto& r : ri) res.K_ri.push_back(r.K);
    for (const auto& r : li) res.K_li.push_back(r.K);
    res.ri_variation = gain_variation(res.K_ri, cfg.burn_in);
    res.li_variation = gain_variation(res.K_li, cfg.burn_in);
    return res;
}

ConvergenceResult run_convergence_mc(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::size_t runs = static_cast<std::size_t>(cfg.mc_runs);
    ConvergenceResult res;
    res.error_norms.resize(runs);
    res.seeds.resize(runs);
    const Mat3 l0 = sqrt_factor(cfg.initial_error_cov, "initial_error_cov", true);
    const NoiseParams params = NoiseParams::from_spec(cfg.noise_true, cfg.estimate_sigma0);
    parallel_for(runs, resolve_threads(cfg.threads), [&](std::size_t r) {
        const std::uint64_t seed = derive_seed(cfg.seed, r);
        res.seeds[r] = seed;
        Rng rng(splitmix64(seed));
        const Vec3 xi0 = l0 * rng.normal_vector<3>();
        TrajectoryConfig tc = cfg.trajectory;
        tc.seed = seed;
        tc.q0 = quat_mul(exp_map(Vec3(-xi0 / 2.0)), cfg.estimate_q0);
        tc.q0_tangent_cov.setZero();
        const Trajectory tr = generate_trajectory(tc, cfg.world, cfg.noise_true);
        const FilterState init{cfg.estimate_q0, cfg.estimate_sigma0, 0};
        res.error_norms[r] = error_norms(tr, init.q, riekf_run(tr.samples, init, params, cfg.world, tr.dt));
    });
    const std::size_t len = res.error_norms.front().size();
    std::vector<double> column(runs);
    for (std::size_t k = 0; k < len; ++k) {
        for (std::size_t r = 0; r < runs; ++r) column[r] = res.error_norms[r][k];
        res.median.push_back(median(column));
        res.q25.push_back(quantile(column, 0.25));
        res.q75.push_back(quantile(column, 0.75));
    }
    return res;
}

namespace {

int best_window(const std::vector<CovarianceWindowSummary>& ws, double CovarianceWindowSummary::*field) {
    int best = 0;
    double best_val = std::numeric_limits<double>::infinity();
    for (const auto& w : ws) {
        const double v = w.*field;
        if (std::isfinite(v) && v < best_val) {
            best_val = v;
            best = w.window;
        }
    }
    return best;
}

}  // namespace

int CovarianceResult::best_window_eta() const { return best_window(windows, &CovarianceWindowSummary::eta_rel_iqr); }
int CovarianceResult::best_window_nu() const { return best_window(windows, &CovarianceWindowSummary::nu_rel_iqr); }

CovarianceResult run_covariance_mc(const ExperimentConfig& cfg) {
    cfg.validate();
    const std::size_t runs = static_cast<std::size_t>(cfg.mc_runs);
    const std::size_t nw = cfg.window_lengths.size();
    CovarianceResult res;
    res.eta_true_norm = cfg.noise_true.sigma_eta.norm();
    res.nu_true_norm = cfg.noise_true.sigma_nu().norm();
    res.seeds.resize(runs);
    res.windows.resize(nw);
    for (std::size_t w = 0; w < nw; ++w) {
        res.windows[w].window = cfg.window_lengths[w];
        res.windows[w].runs.resize(runs);
    }
    const NoiseParams theta0 = cfg.theta0();
    parallel_for(runs, resolve_threads(cfg.threads), [&](std::size_t r) {
        const std::uint64_t seed = derive_seed(cfg.seed, r);
        res.seeds[r] = seed;
        TrajectoryConfig tc = cfg.trajectory;
        tc.seed = seed;
        const Trajectory tr = generate_trajectory(tc, cfg.world, cfg.noise_true);
        for (std::size_t w = 0; w < nw; ++w) {
            CovarianceRun& out = res.windows[w].runs[r];
            try {
                const AdaptiveResult ad = run_adaptive(tr.samples, theta0, cfg.world, cfg.estimate_q0, tr.dt,
                                                       static_cast<std::size_t>(cfg.window_lengths[w]), cfg.em);
                out.eta_norm = ad.theta.sigma_eta.norm();
                out.nu_norm = ad.theta.sigma_nu.norm();
                for (const auto& aw : ad.windows) out.iterations += aw.report.iterations;
            } catch (const std::exception& e) {
                out.ok = false;
                out.eta_norm = out.nu_norm = std::numeric_limits<double>::quiet_NaN();
                out.error = e.what();
            }
        }
    });
    for (auto& ws : res.windows) {
        std::vector<double> eta, nu, eta_rel, nu_rel;
        for (const auto& run : ws.runs) {
            if (!run.ok) {
                ++ws.failures;
                continue;
            }
            eta.push_back(run.eta_norm);
            nu.push_back(run.nu_norm);
            eta_rel.push_back((run.eta_norm - res.eta_true_norm) / res.eta_true_norm);
            nu_rel.push_back((run.nu_norm - res.nu_true_norm) / res.nu_true_norm);
        }
        ws.eta_median = median(eta);
        ws.nu_median = median(nu);
        ws.eta_rel_iqr = iqr(eta_rel);
        ws.nu_rel_iqr = iqr(nu_rel);
    }
    return res;
}

SingleRunResult run_single(const ExperimentConfig& cfg) {
    cfg.validate();
    TrajectoryConfig tc = cfg.trajectory;
    tc.seed = derive_seed(cfg.seed, 0);
    SingleRunResult res;
    res.trajectory = generate_trajectory(tc, cfg.world, cfg.noise_true);
    res.init = FilterState{cfg.estimate_q0, cfg.estimate_sigma0, 0};
    const NoiseParams params = NoiseParams::from_spec(cfg.noise_true, cfg.estimate_sigma0);
    res.records = riekf_run(res.trajectory.samples, res.init, params, cfg.world, res.trajectory.dt);
    res.error_norms = error_norms(res.trajectory, res.init.q, res.records);
    return res;
}

// ---------------------------------------------------------------------------
// Output

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    auto out = open_out(path);
    out << text;
}

std::vector<std::string> gain_columns(const std::string& prefix) {
    std::vector<std::string> cols;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 6; ++j) cols.push_back(prefix + "K" + std::to_string(i) + std::to_string(j));
    return cols;
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c == '\n' ? ' ' : c;
    }
    return out + "\"";
}

}  // namespace

void write_error_norms_csv(std::ostream& os, const std::vector<double>& norms) {
    csv::write_header(os, {"k", "error_norm"});
    for (std::size_t k = 0; k < norms.size(); ++k) csv::write_row(os, std::to_string(k), {norms[k]});
}

void write_gain_compare(const fs::path& dir, const GainCompareResult& res, int burn_in) {
    {
        auto out = open_out(dir / "gain_compare.csv");
        std::vector<std::string> cols = {"k"};
        for (const auto& c : gain_columns("ri_")) cols.push_back(c);
        for (const auto& c : gain_columns("li_")) cols.push_back(c);
        csv::write_header(out, cols);
        for (std::size_t i = 0; i < res.K_ri.size(); ++i) {
            std::vector<double> row;
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 6; ++b) row.push_back(res.K_ri[i](a, b));
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 6; ++b) row.push_back(res.K_li[i](a, b));
            csv::write_row(out, std::to_string(i + 1), row);
        }
    }
    {
        auto out = open_out(dir / "gain_compare_summary.csv");
        csv::write_header(out, {"filter", "burn_in", "max_variation"});
        out << "ri-ekf," << burn_in << ',' << csv::format(res.ri_variation) << '\n';
        out << "li-ekf," << burn_in << ',' << csv::format(res.li_variation) << '\n';
    }
    svg::LinePlot plot;
    plot.title = "Kalman gain entries, RI-EKF (solid colors) vs LI-EKF (light)";
    plot.x_label = "step k";
    plot.y_label = "gain entry";
    const std::pair<int, int> entries[] = {{0, 1}, {1, 2}, {2, 4}};
    const char* dark[] = {"#1f77b4", "#d62728", "#2ca02c"};
    const char* light[] = {"#9ecae1", "#fc9272", "#a1d99b"};
    for (int e = 0; e < 3; ++e) {
        const auto [a, b] = entries[e];
        svg::Series ri, li;
        const std::string name = "K" + std::to_string(a) + std::to_string(b);
        ri.label = "RI " + name;
        li.label = "LI " + name;
        ri.color = dark[e];
        li.color = light[e];
        for (std::size_t i = 0; i < res.K_ri.size(); ++i) {
            ri.x.push_back(static_cast<double>(i + 1));
            li.x.push_back(static_cast<double>(i + 1));
            ri.y.push_back(res.K_ri[i](a, b));
            li.y.push_back(res.K_li[i](a, b));
        }
        plot.series.push_back(std::move(li));
        plot.series.push_back(std::move(ri));
    }
    write_text(dir / "gain_compare.svg", svg::render(plot));
}

void write_convergence(const fs::path& dir, const ConvergenceResult& res) {
    const std::size_t runs = res.error_norms.size();
    const std::size_t len = res.median.size();
    {
        auto out = open_out(dir / "convergence_runs.csv");
        std::vector<std::string> cols = {"k"};
        for (std::size_t r = 0; r < runs; ++r) cols.push_back("run" + std::to_string(r));
        csv::write_header(out, cols);
        std::vector<double> row(runs);
        for (std::size_t k = 0; k < len; ++k) {
            for (std::size_t r = 0; r < runs; ++r) row[r] = res.error_norms[r][k];
            csv::write_row(out, std::to_string(k), row);
        }
    }
    {
        auto out = open_out(dir / "convergence_envelope.csv");
        csv::write_header(out, {"k", "median", "q25", "q75"});
        for (std::size_t k = 0; k < len; ++k) {
            csv::write_row(out, std::to_string(k), {res.median[k], res.q25[k], res.q75[k]});
        }
    }
    svg::LinePlot plot;
    plot.title = "Attitude error norm over " + std::to_string(runs) + " runs";
    plot.x_label = "step k";
    plot.y_label = "|xi_k| (rad)";
    plot.log_y = true;
    svg::Band band;
    for (std::size_t k = 0; k < len; ++k) band.x.push_back(static_cast<double>(k));
    band.lo = res.q25;
    band.hi = res.q75;
    plot.bands.push_back(band);
    for (std::size_t r = 0; r < std::min<std::size_t>(runs, 20); ++r) {
        svg::Series s;
        s.x = band.x;
        s.y = res.error_norms[r];
        s.color = "#999999";
        s.width = 0.6;
        s.opacity = 0.5;
        plot.series.push_back(std::move(s));
    }
    svg::Series med;
    med.label = "median";
    med.x = band.x;
    med.y = res.median;
    med.width = 2.0;
    plot.series.push_back(std::move(med));
    write_text(dir / "convergence.svg", svg::render(plot));
}

void write_covariance(const fs::path& dir, const CovarianceResult& res) {
    {
        auto out = open_out(dir / "covariance_violin.csv");
        csv::write_header(out, {"window", "run", "sigma_eta_norm", "sigma_nu_norm", "sigma_eta_rel_err",
                                "sigma_nu_rel_err", "em_iterations", "ok"});
        for (const auto& ws : res.windows) {
            for (std::size_t r = 0; r < ws.runs.size(); ++r) {
                const auto& run = ws.runs[r];
                csv::write_row(out, std::to_string(ws.window) + "," + std::to_string(r),
                               {run.eta_norm, run.nu_norm, (run.eta_norm - res.eta_true_norm) / res.eta_true_norm,
                                (run.nu_norm - res.nu_true_norm) / res.nu_true_norm,
                                static_cast<double>(run.iterations), run.ok ? 1.0 : 0.0});
            }
        }
    }
    {
        auto out = open_out(dir / "covariance_summary.csv");
        csv::write_header(out, {"window", "sigma_eta_true_norm", "sigma_eta_median", "sigma_eta_rel_median",
                                "sigma_eta_rel_iqr", "sigma_nu_true_norm", "sigma_nu_median", "sigma_nu_rel_median",
                                "sigma_nu_rel_iqr", "failures"});
        for (const auto& ws : res.windows) {
            csv::write_row(out, std::to_string(ws.window),
                           {res.eta_true_norm, ws.eta_median, ws.eta_median / res.eta_true_norm - 1.0, ws.eta_rel_iqr,
                            res.nu_true_norm, ws.nu_median, ws.nu_median / res.nu_true_norm - 1.0, ws.nu_rel_iqr,
                            static_cast<double>(ws.failures)});
        }
    }
    {
        auto out = open_out(dir / "covariance_failures.csv");
        out << "window,run,message\n";
        for (const auto& ws : res.windows) {
            for (std::size_t r = 0; r < ws.runs.size(); ++r) {
                if (!ws.runs[r].ok) out << ws.window << ',' << r << ',' << quote(ws.runs[r].error) << '\n';
            }
        }
    }
    for (int which = 0; which < 2; ++which) {
        svg::ViolinPlot plot;
        plot.title = which == 0 ? "Estimated |Sigma_eta| by window length" : "Estimated |Sigma_nu| by window length";
        plot.y_label = which == 0 ? "|Sigma_eta|_F" : "|Sigma_nu|_F";
        plot.reference = which == 0 ? res.eta_true_norm : res.nu_true_norm;
        for (const auto& ws : res.windows) {
            plot.labels.push_back("n = " + std::to_string(ws.window));
            std::vector<double> g;
            for (const auto& run : ws.runs)
                if (run.ok) g.push_back(which == 0 ? run.eta_norm : run.nu_norm);
            plot.groups.push_back(std::move(g));
        }
        write_text(dir / (which == 0 ? "covariance_eta.svg" : "covariance_nu.svg"), svg::render(plot));
    }
}

void write_single_run(const fs::path& dir, const SingleRunResult& res) {
    {
        auto out = open_out(dir / "trajectory.csv");
        write_trajectory_csv(out, res.trajectory);
    }
    {
        auto out = open_out(dir / "step_records.csv");
        write_step_records_csv(out, res.init, res.records);
    }
    {
        auto out = open_out(dir / "errors.csv");
        write_error_norms_csv(out, res.error_norms);
    }
    svg::LinePlot plot;
    plot.title = "RI-EKF attitude error";
    plot.x_label = "step k";
    plot.y_label = "|xi_k| (rad)";
    plot.log_y = true;
    svg::Series s;
    for (std::size_t k = 0; k < res.error_norms.size(); ++k) s.x.push_back(static_cast<double>(k));
    s.y = res.error_norms;
    plot.series.push_back(std::move(s));
    write_text(dir / "errors.svg", svg::render(plot));
}

void write_adaptive(const fs::path& dir, const AdaptiveResult& res) {
    std::vector<std::string> theta_cols;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) theta_cols.push_back("sigma_eta" + std::to_string(i) + std::to_string(j));
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) theta_cols.push_back("sigma_nu" + std::to_string(i) + std::to_string(j));
    auto theta_row = [](const NoiseParams& th, std::vector<double>& row) {
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) row.push_back(th.sigma_eta(a, b));
        for (int a = 0; a < 6; ++a)
            for (int b = 0; b < 6; ++b) row.push_back(th.sigma_nu(a, b));
    };
    {
        auto out = open_out(dir / "adapt_windows.csv");
        std::vector<std::string> cols = {"window", "start", "iterations", "converged_by", "G_final"};
        cols.insert(cols.end(), theta_cols.begin(), theta_cols.end());
        csv::write_header(out, cols);
        for (std::size_t w = 0; w < res.windows.size(); ++w) {
            const auto& aw = res.windows[w];
            std::vector<double> row = {aw.report.G_history.back()};
            theta_row(aw.report.theta(), row);
            csv::write_row(out,
                           std::to_string(w) + "," + std::to_string(aw.start) + "," +
                               std::to_string(aw.report.iterations) + "," + to_string(aw.report.converged_by),
                           row);
        }
    }
    {
        auto out = open_out(dir / "em_history.csv");
        std::vector<std::string> cols = {"window", "iter", "G"};
        cols.insert(cols.end(), theta_cols.begin(), theta_cols.end());
        csv::write_header(out, cols);
        for (std::size_t w = 0; w < res.windows.size(); ++w) {
            const auto& rep = res.windows[w].report;
            for (std::size_t j = 0; j < rep.theta_history.size(); ++j) {
                std::vector<double> row = {j < rep.G_history.size() ? rep.G_history[j]
                                                                    : std::numeric_limits<double>::quiet_NaN()};
                theta_row(rep.theta_history[j], row);
                csv::write_row(out, std::to_string(w) + "," + std::to_string(j), row);
            }
        }
    }
}

void write_manifest(const fs::path& dir, const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                    double wall_seconds, const std::vector<std::string>& files, const json& summary) {
    const json config = to_json(cfg);
    write_text(dir / "config.json", config.dump(2) + "\n");
    json manifest;
    manifest["version"] = kVersion;
    manifest["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION);
    manifest["experiment"] = to_string(cfg.experiment);
    manifest["config"] = config;
    manifest["seeds"] = seeds;
    manifest["threads"] = resolve_threads(cfg.threads);
    manifest["wall_clock_seconds"] = wall_seconds;
    manifest["files"] = files;
    manifest["summary"] = summary;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

json run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> files;
    json summary = json::object();
    switch (cfg.experiment) {
        case Experiment::GainCompare: {
            const auto res = run_gain_compare(cfg);
            write_gain_compare(dir, res, cfg.burn_in);
            seeds = {res.seed};
            summary = {{"ri_variation", res.ri_variation}, {"li_variation", res.li_variation}};
            files = {"gain_compare.csv", "gain_compare_summary.csv", "gain_compare.svg"};
            break;
        }
        case Experiment::ConvergenceMc: {
            const auto res = run_convergence_mc(cfg);
            write_convergence(dir, res);
            seeds = res.seeds;
            summary = {{"median_initial", res.median_initial()}, {"median_final", res.median_final()}};
            files = {"convergence_runs.csv", "convergence_envelope.csv", "convergence.svg"};
            break;
        }
        case Experiment::CovarianceMc: {
            const auto res = run_covariance_mc(cfg);
            write_covariance(dir, res);
            seeds = res.seeds;
            summary["sigma_eta_true_norm"] = res.eta_true_norm;
            summary["sigma_nu_true_norm"] = res.nu_true_norm;
            summary["best_window_sigma_eta"] = res.best_window_eta();
            summary["best_window_sigma_nu"] = res.best_window_nu();
            for (const auto& ws : res.windows) {
                summary["windows"].push_back({{"window", ws.window},
                                              {"sigma_eta_median", ws.eta_median},
                                              {"sigma_eta_rel_iqr", ws.eta_rel_iqr},
                                              {"sigma_nu_median", ws.nu_median},
                                              {"sigma_nu_rel_iqr", ws.nu_rel_iqr},
                                              {"failures", ws.failures}});
            }
            files = {"covariance_violin.csv", "covariance_summary.csv", "covariance_failures.csv",
                     "covariance_eta.svg", "covariance_nu.svg"};
            break;
        }
        case Experiment::SingleRun: {
            const auto res = run_single(cfg);
            write_single_run(dir, res);
            seeds = {derive_seed(cfg.seed, 0)};
            summary = {{"final_error_norm", res.error_norms.back()}};
            files = {"trajectory.csv", "step_records.csv", "errors.csv", "errors.svg"};
            break;
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    files.push_back("config.json");
    write_manifest(dir, cfg, seeds, secs, files, summary);
    return summary;
}

}  // namespace iaekf
