// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is non-zero when a gating criterion fails. The window-80 line is
// reported but does not gate; see README, "Known results".

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "iaekf/adaptive_em.hpp"
#include "iaekf/harness.hpp"
#include "iaekf/smoothing.hpp"
#include "oracles.hpp"

using namespace iaekf;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

int gating_failures = 0;

void report(const std::string& name, const std::function<Verdict()>& check, double budget_s, bool gating = true) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
        v = check();
    } catch (const std::exception& e) {
        v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > budget_s) {
        v.pass = false;
        v.detail += "; over time budget";
    }
    if (!v.pass && gating) ++gating_failures;
    std::printf("%s  %s  [%.1f s / %.0f s]  %s%s\n", v.pass ? "PASS" : "FAIL", name.c_str(), secs, budget_s,
                v.detail.c_str(), gating ? "" : "  (non-gating)");
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

Verdict math_core() {
    std::mt19937_64 gen(2024);
    std::normal_distribution<double> nd;
    auto vec = [&](double s) -> Vec3 { return Vec3(nd(gen), nd(gen), nd(gen)) * s; };

    Quaternion q = Quaternion::identity();
    double drift = 0.0;
    for (int i = 0; i < 1000000; ++i) {
        q = quat_mul(q, exp_map(vec(1.0)));
        drift = std::max(drift, std::abs(q.coeffs().norm() - 1.0));
    }
    double rot = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const Quaternion p = Quaternion::normalized(Vec4(nd(gen), nd(gen), nd(gen), nd(gen)));
        const Vec3 v = vec(1.0);
        rot = std::max(rot, (rotate(p, v) - dcm(p) * v).norm() / v.norm());
    }
    double rod = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const Vec3 xi = vec(0.8);
        const Mat3 r = oracle::rodrigues(xi.normalized(), 2.0 * xi.norm());
        rod = std::max(rod, (dcm(exp_map(xi)) - r.transpose()).cwiseAbs().maxCoeff());
    }
    const bool ok = drift <= 1e-9 && rot <= 1e-12 && rod <= 1e-9;
    return {ok, fmt("norm drift %.2e", drift) + fmt(", rotate/dcm %.2e", rot) + fmt(", exp/Rodrigues %.2e", rod)};
}

Verdict smoother_oracle() {
    std::mt19937_64 gen(77);
    std::uniform_int_distribution<int> len(1, 10), rows(1, 6);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = len(gen);
        oracle::LinearSystem sys;
        sys.m0 = oracle::random_vector(gen, 3);
        sys.P0 = oracle::random_spd(gen, 3, 1.0);
        std::vector<SmootherStep> steps(1);
        steps[0].x_post = sys.m0;
        steps[0].P_post = sys.P0;
        steps[0].P_prior = sys.P0;
        for (int i = 0; i < n; ++i) {
            const int m = rows(gen);
            Mat3 f = Mat3::Identity();
            for (int c = 0; c < 3; ++c) f.col(c) += Vec3(oracle::random_vector(gen, 3, 0.2));
            Eigen::MatrixXd h(m, 3);
            for (int r = 0; r < m; ++r) h.row(r) = oracle::random_vector(gen, 3).transpose();
            sys.F.push_back(f);
            sys.Q.push_back(oracle::random_spd(gen, 3, 0.1));
            sys.H.push_back(h);
            sys.R.push_back(oracle::random_spd(gen, m, 0.2));
            sys.y.push_back(oracle::random_vector(gen, m));

            const SmootherStep& prev = steps.back();
            SmootherStep s;
            s.F = f;
            s.x_prior = f * prev.x_post;
            s.P_prior = f * prev.P_post * f.transpose() + Mat3(sys.Q.back());
            const Eigen::MatrixXd k =
                s.P_prior * h.transpose() * (h * s.P_prior * h.transpose() + sys.R.back()).inverse();
            s.x_post = s.x_prior + k * (sys.y.back() - h * s.x_prior);
            s.KH = k * h;
            s.P_post = (Mat3::Identity() - s.KH) * s.P_prior;
            steps.push_back(s);
        }
        const auto post = oracle::batch_posterior(sys);
        SmoothedTrajectory sm = rts_smooth(steps);
        lag_one_smooth(steps, sm);
        for (int i = 0; i <= n; ++i) {
            worst = std::max(worst, (sm.xi[i] - post.x(i)).cwiseAbs().maxCoeff());
            worst = std::max(worst, (sm.P[i] - post.P(i, i)).cwiseAbs().maxCoeff());
            if (i >= 1) worst = std::max(worst, (sm.P_lag[i] - post.P(i, i - 1)).cwiseAbs().maxCoeff());
        }
    }
    return {worst <= 1e-9, fmt("100 systems, max deviation %.2e", worst)};
}

Verdict em_oracle() {
    std::mt19937_64 gen(78);
    const double dt = 0.1;
    EmOptions opts;
    opts.max_iter = 10;
    opts.tol_G = 0.0;
    opts.tol_theta = 0.0;
    double worst = 0.0;
    int monotone = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 10 + trial % 30;
        Mat63 h;
        for (int c = 0; c < 3; ++c) h.col(c) = Vec6(oracle::random_vector(gen, 6));
        const Mat3 le = Mat3(oracle::random_spd(gen, 3, 1.0) * dt * dt).llt().matrixL();
        const Mat6 ln = Mat6(oracle::random_spd(gen, 6, 0.5)).llt().matrixL();
        Vec3 x = oracle::random_vector(gen, 3);
        std::vector<Vec6> y;
        for (int i = 0; i < n; ++i) {
            x += le * Vec3(oracle::random_vector(gen, 3));
            y.push_back(h * x + ln * Vec6(oracle::random_vector(gen, 6)));
        }
        NoiseParams th0;
        th0.mu0 = oracle::random_vector(gen, 3);
        th0.sigma0 = oracle::random_spd(gen, 3, 2.0);
        th0.sigma_eta = oracle::random_spd(gen, 3, 3.0);
        th0.sigma_nu = oracle::random_spd(gen, 6, 2.0);

        const EmReport rep = em_fit_linear(y, h, th0, dt, opts);
        const auto ref = oracle::textbook_em({y.begin(), y.end()}, h, {th0.mu0, th0.sigma0, th0.sigma_eta, th0.sigma_nu},
                                             dt, opts.max_iter);
        const double shift = 3.0 * n * std::log(dt * dt);
        for (std::size_t j = 0; j < ref.size(); ++j) {
            const NoiseParams& a = rep.theta_history[j];
            const auto& b = ref[j].theta;
            const double scale = 1.0 + b.sigma_eta.norm() + b.sigma_nu.norm() + b.sigma0.norm() + b.mu0.norm();
            worst = std::max({worst, (a.sigma_eta - b.sigma_eta).norm() / scale, (a.sigma_nu - b.sigma_nu).norm() / scale,
                              (a.sigma0 - b.sigma0).norm() / scale, (a.mu0 - b.mu0).norm() / scale,
                              std::abs(rep.G_history[j] + shift - ref[j].G) / (1.0 + std::abs(ref[j].G))});
        }
        bool ok = true;
        for (std::size_t j = 1; j < rep.G_history.size(); ++j) {
            ok = ok && rep.G_history[j] <= rep.G_history[j - 1] + 1e-8 * std::abs(rep.G_history[j - 1]);
        }
        monotone += ok;
    }
    return {worst <= 1e-8 && monotone == 100,
            fmt("max deviation from textbook EM %.2e", worst) + ", G non-increasing in " + std::to_string(monotone) +
                "/100 trials"};
}

Verdict gain_compare() {
    const GainCompareResult res = run_gain_compare(ExperimentConfig::defaults(Experiment::GainCompare));
    const bool ok = res.ri_variation < 1e-6 && res.li_variation >= 10.0 * std::max(res.ri_variation, 1e-6);
    return {ok, fmt("RI variation %.2e", res.ri_variation) + fmt(", LI variation %.2e", res.li_variation)};
}

Verdict convergence() {
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        ExperimentConfig cfg = ExperimentConfig::defaults(Experiment::ConvergenceMc);
        cfg.seed = seed;
        const ConvergenceResult res = run_convergence_mc(cfg);
        const double ratio = res.median_final() / res.median_initial();
        ok = ok && ratio < 0.05;
        detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) +
                  fmt(": final/initial median %.4f", ratio);
    }
    return {ok, "100 runs; " + detail};
}

bool medians_within(const CovarianceResult& res, std::string& detail) {
    bool ok = true;
    double worst = 0.0;
    for (const auto& ws : res.windows) {
        const double de = std::abs(ws.eta_median / res.eta_true_norm - 1.0);
        const double dn = std::abs(ws.nu_median / res.nu_true_norm - 1.0);
        worst = std::max({worst, de, dn});
        ok = ok && de <= 0.3 && dn <= 0.3 && ws.failures == 0;
    }
    detail = fmt("worst median deviation %.3f", worst);
    return ok;
}

CovarianceResult full_campaign;

Verdict covariance_smoke() {
    ExperimentConfig cfg = ExperimentConfig::defaults(Experiment::CovarianceMc);
    cfg.mc_runs = 10;
    std::string detail;
    const bool ok = medians_within(run_covariance_mc(cfg), detail);
    return {ok, "10 runs, " + detail};
}

Verdict covariance_full() {
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        ExperimentConfig cfg = ExperimentConfig::defaults(Experiment::CovarianceMc);
        cfg.seed = seed;
        const CovarianceResult res = run_covariance_mc(cfg);
        if (seed == 1) full_campaign = res;
        std::string d;
        ok = medians_within(res, d) && ok;
        detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) + ": " + d;
    }
    return {ok, "100 runs x windows {20,40,60,80,100}; " + detail};
}

Verdict window_80() {
    if (full_campaign.windows.empty()) return {false, "full campaign did not run"};
    std::string detail = "rel. IQR eta/nu by window:";
    for (const auto& ws : full_campaign.windows) {
        detail += " " + std::to_string(ws.window) + fmt("=%.3f", ws.eta_rel_iqr) + fmt("/%.3f", ws.nu_rel_iqr);
    }
    const int be = full_campaign.best_window_eta();
    const int bn = full_campaign.best_window_nu();
    detail += "; observed optimum eta " + std::to_string(be) + ", nu " + std::to_string(bn);
    return {be == 80 && bn == 80, detail};
}

std::map<std::string, std::string> outputs(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name == "manifest.json" || name == "config.json") continue;
        std::ifstream in(entry.path(), std::ios::binary);
        files[name] = {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    }
    return files;
}

Verdict determinism() {
    const fs::path root = fs::temp_directory_path() / "iaekf_acceptance";
    fs::remove_all(root);
    std::string detail;
    bool ok = true;
    for (Experiment e : {Experiment::GainCompare, Experiment::ConvergenceMc, Experiment::CovarianceMc,
                         Experiment::SingleRun}) {
        const std::string name = to_string(e);
        ExperimentConfig cfg = ExperimentConfig::defaults(e);
        if (e == Experiment::CovarianceMc) cfg.mc_runs = 10;
        cfg.output_dir = (root / (name + "_first")).string();
        run_experiment(cfg);
        // Second run from the emitted config, on a different worker count.
        ExperimentConfig again = load_config(fs::path(cfg.output_dir) / "config.json");
        again.output_dir = (root / (name + "_again")).string();
        again.threads = 2;
        run_experiment(again);
        const auto a = outputs(cfg.output_dir);
        const auto b = outputs(again.output_dir);
        const bool same = !a.empty() && a == b;
        ok = ok && same;
        detail += (detail.empty() ? "" : ", ") + name + (same ? " identical" : " DIFFERS") + " (" +
                  std::to_string(a.size()) + " files)";
    }
    fs::remove_all(root);
    return {ok, detail};
}

}  // namespace

int main() {
    std::printf("iaekf %s acceptance suite\n", kVersion);
    report("math core: composition closure, rotate/dcm, exp/Rodrigues", math_core, 30);
    report("smoother oracle: RTS + lag-one vs batch conditioning", smoother_oracle, 10);
    report("EM oracle: textbook EM agreement and G monotonicity", em_oracle, 60);
    report("gain comparison: RI constant, LI varies", gain_compare, 10);
    report("convergence MC: median final < 5% of median initial", convergence, 120);
    report("covariance MC smoke: medians within 30%", covariance_smoke, 180);
    report("covariance MC full: medians within 30%", covariance_full, 1800);
    report("covariance MC full: window 80 minimizes relative-error IQR", window_80, 1, false);
    report("determinism: re-run from emitted config is byte-identical", determinism, 300);
    std::printf("%d gating criteria failed\n", gating_failures);
    return gating_failures == 0 ? 0 : 1;
}
