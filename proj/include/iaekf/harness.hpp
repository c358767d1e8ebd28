#pragma once

// Experiment orchestration: sliding-window adaptive filtering, the three
// Monte Carlo / comparison studies, summary statistics and output files.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "iaekf/adaptive_em.hpp"
#include "iaekf/filters.hpp"
#include "iaekf/models.hpp"

namespace iaekf {

enum class Experiment { GainCompare, ConvergenceMc, CovarianceMc, SingleRun };

std::string to_string(Experiment e);
Experiment experiment_from_string(const std::string& s);

struct ExperimentConfig {
    Experiment experiment = Experiment::SingleRun;
    TrajectoryConfig trajectory;
    WorldConstants world;
    NoiseSpec noise_true;
    /// Theta^0 for the EM studies: scale * truth, or the explicit blocks when set.
    double init_scale_eta = 1.0;
    double init_scale_nu = 1.0;
    bool init_explicit = false;
    Mat3 init_sigma_eta = Mat3::Identity();
    Mat6 init_sigma_nu = Mat6::Identity();
    /// Initial filter estimate and its error covariance.
    Quaternion estimate_q0 = Quaternion::identity();
    Mat3 estimate_sigma0 = Mat3::Identity();
    /// Convergence study: xi0 ~ N(0, initial_error_cov) with q0 = exp_map(-xi0 / 2) (x) estimate_q0.
    Mat3 initial_error_cov = Mat3::Identity();
    int mc_runs = 100;
    std::vector<int> window_lengths = {20, 40, 60, 80, 100};
    EmOptions em;
    /// Gain study: steps before gain variation is measured.
    int burn_in = 200;
    std::uint64_t seed = 1;
    std::string output_dir = "out";
    /// 0 = use IAEKF_THREADS, else hardware concurrency.
    int threads = 0;

    static ExperimentConfig defaults(Experiment e);
    /// Throws ConfigError describing the first invalid field.
    void validate() const;
    NoiseParams theta0() const;
};

/// Every field, in the same schema `config_from_json` reads.
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Starts from ExperimentConfig::defaults of the document's "experiment"
/// (or `fallback`) and overrides the fields present. Unknown keys and type
/// mismatches throw ConfigError naming the field.
ExperimentConfig config_from_json(const nlohmann::json& doc, Experiment fallback = Experiment::SingleRun);

/// Parses a config file. Syntax errors report line and column.
ExperimentConfig load_config(const std::filesystem::path& path, Experiment fallback = Experiment::SingleRun);

/// Worker count: `requested` if positive, else IAEKF_THREADS if positive, else hardware concurrency.
unsigned resolve_threads(int requested);

/// Runs fn(0..count-1) on up to `threads` workers. Results must be written by index.
void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Sliding-window adaptation

struct AdaptiveWindow {
    std::size_t start = 0;  // first sample index of the window
    EmReport report;
    Quaternion q_ref;       // entry orientation for the window
};

struct AdaptiveResult {
    std::vector<AdaptiveWindow> windows;
    NoiseParams theta;      // estimate after the last full window
};

/// Fits EM on consecutive non-overlapping windows of `window` samples, warm
/// starting each from the previous estimate. The next window enters at the
/// posterior of a filter pass over the finished window under its fitted
/// Theta, with mu0 = 0 and Sigma0 = that posterior's P. A trailing partial
/// window is dropped.
AdaptiveResult run_adaptive(std::span<const SensorSample> samples, const NoiseParams& theta0,
                            const WorldConstants& world, const Quaternion& q_ref, double dt, std::size_t window,
                            const EmOptions& opts);

// ---------------------------------------------------------------------------
// Statistics

double median(std::vector<double> v);
/// Linear-interpolated quantile, p in [0, 1].
double quantile(std::vector<double> v, double p);
double iqr(const std::vector<double>& v);

// ---------------------------------------------------------------------------
// Studies

struct GainCompareResult {
    std::vector<Mat36> K_ri;
    std::vector<Mat36> K_li;
    double ri_variation = 0.0;  // max over entries of (max - min) for k >= burn_in
    double li_variation = 0.0;
    std::uint64_t seed = 0;
};

/// Largest peak-to-peak spread of any gain entry over steps [burn_in, end).
double gain_variation(const std::vector<Mat36>& gains, int burn_in);

GainCompareResult run_gain_compare(const ExperimentConfig& cfg);

struct ConvergenceResult {
    std::vector<std::vector<double>> error_norms;  // [run][k], k = 0..n_steps
    std::vector<double> median;
    std::vector<double> q25;
    std::vector<double> q75;
    std::vector<std::uint64_t> seeds;

    double median_initial() const { return median.front(); }
    double median_final() const { return median.back(); }
};

ConvergenceResult run_convergence_mc(const ExperimentConfig& cfg);

struct CovarianceRun {
    double eta_norm = 0.0;
    double nu_norm = 0.0;
    int iterations = 0;  // EM iterations summed over windows
    bool ok = true;
    std::string error;
};

struct CovarianceWindowSummary {
    int window = 0;
    std::vector<CovarianceRun> runs;
    double eta_median = 0.0;
    double nu_median = 0.0;
    double eta_rel_iqr = 0.0;  // IQR of (|est| - |true|) / |true|
    double nu_rel_iqr = 0.0;
    int failures = 0;
};

struct CovarianceResult {
    double eta_true_norm = 0.0;
    double nu_true_norm = 0.0;
    std::vector<CovarianceWindowSummary> windows;
    std::vector<std::uint64_t> seeds;

    /// Window with the smallest relative-error IQR for Sigma_eta / Sigma_nu.
    int best_window_eta() const;
    int best_window_nu() const;
};

CovarianceResult run_covariance_mc(const ExperimentConfig& cfg);

struct SingleRunResult {
    Trajectory trajectory;
    FilterState init;
    std::vector<StepRecord> records;
    std::vector<double> error_norms;  // k = 0..n_steps
};

SingleRunResult run_single(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Output

void write_gain_compare(const std::filesystem::path& dir, const GainCompareResult& res, int burn_in);
void write_convergence(const std::filesystem::path& dir, const ConvergenceResult& res);
void write_covariance(const std::filesystem::path& dir, const CovarianceResult& res);
void write_single_run(const std::filesystem::path& dir, const SingleRunResult& res);

/// adapt_windows.csv (one row per window: start, iterations, stop reason,
/// final G and Theta) and em_history.csv (every EM iterate of every window).
void write_adaptive(const std::filesystem::path& dir, const AdaptiveResult& res);

/// Per-step error norms |attitude_error| with row k = 0 for the initial estimate.
void write_error_norms_csv(std::ostream& os, const std::vector<double>& norms);

/// config.json (resolved config) and manifest.json (config, seeds, version,
/// wall-clock seconds, worker count, produced files, summary).
void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& cfg,
                    const std::vector<std::uint64_t>& seeds, double wall_seconds,
                    const std::vector<std::string>& files, const nlohmann::json& summary = nlohmann::json::object());

/// Runs cfg.experiment, writes every output under cfg.output_dir and returns
/// the headline statistics (also stored in the manifest).
nlohmann::json run_experiment(const ExperimentConfig& cfg);

inline constexpr const char* kVersion = "1.0.0";

}  // namespace iaekf
