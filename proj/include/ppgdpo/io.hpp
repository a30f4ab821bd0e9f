#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "distill.hpp"
#include "market.hpp"
#include "policy.hpp"
#include "ppo.hpp"
#include "stage1.hpp"
#include "stage2.hpp"

namespace ppgdpo {

using json = nlohmann::json;

// Matrices are row-major nested arrays, vectors flat arrays.

inline json to_json_matrix(const MatrixXd& M) {
    json a = json::array();
    for (Index i = 0; i < M.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
        a.push_back(std::move(row));
    }
    return a;
}

inline json to_json_vector(const VectorXd& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

inline MatrixXd matrix_from_json(const json& a, const std::string& what) {
    if (!a.is_array()) throw std::invalid_argument(what + ": expected a nested array");
    const Index r = static_cast<Index>(a.size());
    const Index c = r ? static_cast<Index>(a[0].size()) : 0;
    MatrixXd M(r, c);
    for (Index i = 0; i < r; ++i) {
        if (!a[i].is_array() || static_cast<Index>(a[i].size()) != c)
            throw std::invalid_argument(what + ": ragged row " + std::to_string(i));
        for (Index j = 0; j < c; ++j) M(i, j) = a[i][j].get<double>();
    }
    return M;
}

inline VectorXd vector_from_json(const json& a, const std::string& what) {
    if (!a.is_array()) throw std::invalid_argument(what + ": expected an array");
    VectorXd v(static_cast<Index>(a.size()));
    for (Index i = 0; i < v.size(); ++i) v(i) = a[i].get<double>();
    return v;
}

inline json to_json(const GaussianLaw& g) { return {{"mean", to_json_vector(g.mean)}, {"cov", to_json_matrix(g.cov)}}; }

inline GaussianLaw gaussian_from_json(const json& j, const std::string& what) {
    return {vector_from_json(j.at("mean"), what + ".mean"), matrix_from_json(j.at("cov"), what + ".cov")};
}

inline json to_json(const StaticDriftMarket& mk) {
    const FactorData& f = mk.factor_data;
    return {{"kind", "static"},
            {"r", mk.r},
            {"d", mk.d},
            {"m", to_json_vector(mk.m)},
            {"Sigma", to_json_matrix(mk.Sigma)},
            {"q", to_json(mk.q)},
            {"factor_data",
             {{"B", to_json_matrix(f.B)},
              {"Sigma_f", to_json_matrix(f.Sigma_f)},
              {"D", to_json_vector(f.D)},
              {"lambda_m", to_json_vector(f.lambda_m)}}}};
}

inline StaticDriftMarket static_market_from_json(const json& j) {
    StaticDriftMarket mk;
    mk.r = j.at("r").get<double>();
    mk.d = j.at("d").get<int>();
    mk.m = vector_from_json(j.at("m"), "m");
    mk.Sigma = matrix_from_json(j.at("Sigma"), "Sigma");
    mk.q = gaussian_from_json(j.at("q"), "q");
    if (j.contains("factor_data")) {
        const json& f = j.at("factor_data");
        mk.factor_data.B = matrix_from_json(f.at("B"), "factor_data.B");
        mk.factor_data.Sigma_f = matrix_from_json(f.at("Sigma_f"), "factor_data.Sigma_f");
        mk.factor_data.D = vector_from_json(f.at("D"), "factor_data.D");
        mk.factor_data.lambda_m = vector_from_json(f.at("lambda_m"), "factor_data.lambda_m");
    }
    mk.validate();
    return mk;
}

inline json to_json(const OUFactorMarket& ou) {
    return {{"kind", "ou"},
            {"r", ou.r},
            {"d", ou.d},
            {"mfac", ou.mfac},
            {"K", to_json_matrix(ou.K)},
            {"ybar", to_json_vector(ou.ybar)},
            {"Xi", to_json_matrix(ou.Xi)},
            {"B", to_json_matrix(ou.B)},
            {"Sigma", to_json_matrix(ou.Sigma)},
            {"rho", to_json_matrix(ou.rho)},
            {"q0", to_json(ou.q0)}};
}

inline OUFactorMarket ou_market_from_json(const json& j) {
    OUFactorMarket ou;
    ou.r = j.at("r").get<double>();
    ou.d = j.at("d").get<int>();
    ou.mfac = j.at("mfac").get<int>();
    ou.K = matrix_from_json(j.at("K"), "K");
    ou.ybar = vector_from_json(j.at("ybar"), "ybar");
    ou.Xi = matrix_from_json(j.at("Xi"), "Xi");
    ou.B = matrix_from_json(j.at("B"), "B");
    ou.Sigma = matrix_from_json(j.at("Sigma"), "Sigma");
    ou.rho = matrix_from_json(j.at("rho"), "rho");
    ou.q0 = gaussian_from_json(j.at("q0"), "q0");
    ou.validate();
    return ou;
}

// Checkpoints: architecture header plus the flat parameter vector (PolicyNet::params order).

inline json checkpoint_json(const PolicyNet& net, int epoch = -1) {
    json layers = json::array();
    for (const auto& L : net.layers) layers.push_back({L.W.rows(), L.W.cols()});
    return {{"format", "ppgdpo-policy"},
            {"version", 1},
            {"epoch", epoch},
            {"architecture",
             {{"n_in", net.n_in()},
              {"obs_y", net.obs_y},
              {"hidden", net.hidden_sizes()},
              {"n_out", net.n_out()},
              {"layers", layers},
              {"activation", "tanh"},
              {"output_scale", net.output_scale},
              {"horizon", net.horizon}}},
            {"params", to_json_vector(net.params())}};
}

inline PolicyNet policy_from_checkpoint(const json& j) {
    if (j.value("format", "") != "ppgdpo-policy") throw std::invalid_argument("checkpoint: unknown format");
    const json& a = j.at("architecture");
    PolicyNet net;
    net.obs_y = a.at("obs_y").get<int>();
    net.output_scale = a.at("output_scale").get<double>();
    net.horizon = a.at("horizon").get<double>();
    for (const auto& shape : a.at("layers")) {
        Layer L;
        L.W = MatrixXd::Zero(shape[0].get<Index>(), shape[1].get<Index>());
        L.b = VectorXd::Zero(L.W.rows());
        net.layers.push_back(std::move(L));
    }
    if (net.layers.empty() || net.layers.front().W.cols() != net.n_in())
        throw std::invalid_argument("checkpoint: layer shapes do not match the input width");
    for (std::size_t l = 1; l < net.layers.size(); ++l)
        if (net.layers[l].W.cols() != net.layers[l - 1].W.rows())
            throw std::invalid_argument("checkpoint: inconsistent layer shapes at layer " + std::to_string(l));
    net.set_params(vector_from_json(j.at("params"), "params"));
    return net;
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

inline void write_json_file(const std::string& path, const json& j) {
    const auto dir = std::filesystem::path(path).parent_path();
    if (!dir.empty()) std::filesystem::create_directories(dir);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

// Configuration blocks. Every field is optional on input; missing fields keep their defaults.

template <class T>
inline void get_opt(const json& j, const char* key, T& v) {
    if (j.contains(key)) v = j.at(key).get<T>();
}

inline json to_json(const AptScale& s) {
    return {{"loading_sd", s.loading_sd},   {"factor_var_lo", s.factor_var_lo}, {"factor_var_hi", s.factor_var_hi},
            {"idio_var_lo", s.idio_var_lo}, {"idio_var_hi", s.idio_var_hi},     {"lambda_lo", s.lambda_lo},
            {"lambda_hi", s.lambda_hi},     {"r", s.r}};
}

inline void from_json_into(const json& j, AptScale& s) {
    get_opt(j, "loading_sd", s.loading_sd);
    get_opt(j, "factor_var_lo", s.factor_var_lo);
    get_opt(j, "factor_var_hi", s.factor_var_hi);
    get_opt(j, "idio_var_lo", s.idio_var_lo);
    get_opt(j, "idio_var_hi", s.idio_var_hi);
    get_opt(j, "lambda_lo", s.lambda_lo);
    get_opt(j, "lambda_hi", s.lambda_hi);
    get_opt(j, "r", s.r);
}

inline json to_json(const OuParams& p) {
    return {{"mfac", p.mfac}, {"loading_scale", p.loading_scale}, {"kappa", p.kappa}, {"xi", p.xi}, {"rho0", p.rho0}};
}

inline void from_json_into(const json& j, OuParams& p) {
    get_opt(j, "mfac", p.mfac);
    get_opt(j, "loading_scale", p.loading_scale);
    get_opt(j, "kappa", p.kappa);
    get_opt(j, "xi", p.xi);
    get_opt(j, "rho0", p.rho0);
}

inline std::string to_string(ThetaMode m) { return m == ThetaMode::per_episode ? "per_episode" : "batch_shared"; }

inline ThetaMode theta_mode_from_string(const std::string& s) {
    if (s == "per_episode") return ThetaMode::per_episode;
    if (s == "batch_shared") return ThetaMode::batch_shared;
    throw std::invalid_argument("unknown theta_mode '" + s + "'");
}

inline AggregationMode aggregation_from_string(const std::string& s) {
    if (s == "mixed") return AggregationMode::mixed;
    if (s == "decoupled") return AggregationMode::decoupled;
    throw std::invalid_argument("unknown aggregation mode '" + s + "'");
}

inline json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch", c.batch},
            {"mc_budget", c.mc_budget},
            {"theta_mode", to_string(c.theta_mode)},
            {"antithetic", c.antithetic},
            {"eval_every", c.eval_every},
            {"checkpoint_every", c.checkpoint_every},
            {"seed", c.seed},
            {"grad_clip", c.grad_clip},
            {"ring", c.ring},
            {"lr", c.adam.lr},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"adam_eps", c.adam.eps},
            {"cosine", c.adam.cosine},
            {"lr_min", c.adam.lr_min},
            {"hidden", c.arch.hidden},
            {"output_scale", c.arch.output_scale},
            {"zero_output", c.arch.zero_output}};
}

inline void from_json_into(const json& j, TrainConfig& c) {
    get_opt(j, "epochs", c.epochs);
    get_opt(j, "batch", c.batch);
    get_opt(j, "mc_budget", c.mc_budget);
    if (j.contains("theta_mode")) c.theta_mode = theta_mode_from_string(j.at("theta_mode").get<std::string>());
    get_opt(j, "antithetic", c.antithetic);
    get_opt(j, "eval_every", c.eval_every);
    get_opt(j, "checkpoint_every", c.checkpoint_every);
    get_opt(j, "seed", c.seed);
    get_opt(j, "grad_clip", c.grad_clip);
    get_opt(j, "ring", c.ring);
    get_opt(j, "lr", c.adam.lr);
    get_opt(j, "beta1", c.adam.beta1);
    get_opt(j, "beta2", c.adam.beta2);
    get_opt(j, "adam_eps", c.adam.eps);
    get_opt(j, "cosine", c.adam.cosine);
    get_opt(j, "lr_min", c.adam.lr_min);
    get_opt(j, "hidden", c.arch.hidden);
    get_opt(j, "output_scale", c.arch.output_scale);
    get_opt(j, "zero_output", c.arch.zero_output);
}

inline json to_json(const Stage2Config& c) {
    return {{"n_theta", c.n_theta},
            {"n_mc", c.n_mc},
            {"antithetic", c.antithetic},
            {"mode", to_string(c.mode)},
            {"blocks", c.blocks},
            {"seed", c.seed},
            {"ridge_rel", c.ridge_rel},
            {"unreliable_frac", c.unreliable_frac},
            {"cond_max", c.gates.cond_max},
            {"bad_sign_max", c.gates.bad_sign_max},
            {"residual_mult", c.gates.residual_mult}};
}

inline void from_json_into(const json& j, Stage2Config& c) {
    get_opt(j, "n_theta", c.n_theta);
    get_opt(j, "n_mc", c.n_mc);
    get_opt(j, "antithetic", c.antithetic);
    if (j.contains("mode")) c.mode = aggregation_from_string(j.at("mode").get<std::string>());
    get_opt(j, "blocks", c.blocks);
    get_opt(j, "seed", c.seed);
    get_opt(j, "ridge_rel", c.ridge_rel);
    get_opt(j, "unreliable_frac", c.unreliable_frac);
    get_opt(j, "cond_max", c.gates.cond_max);
    get_opt(j, "bad_sign_max", c.gates.bad_sign_max);
    get_opt(j, "residual_mult", c.gates.residual_mult);
}

inline json to_json(const DistillConfig& c) {
    return {{"K_refresh", c.K_refresh}, {"warmup", c.warmup},   {"ramp", c.ramp},       {"lambda_max", c.lambda_max},
            {"c", c.c},                 {"eps", c.eps},         {"M_z", c.M_z},         {"minibatch", c.minibatch},
            {"x_lo", c.x_lo},           {"x_hi", c.x_hi},       {"stage2", to_json(c.stage2)}};
}

inline void from_json_into(const json& j, DistillConfig& c) {
    get_opt(j, "K_refresh", c.K_refresh);
    get_opt(j, "warmup", c.warmup);
    get_opt(j, "ramp", c.ramp);
    get_opt(j, "lambda_max", c.lambda_max);
    get_opt(j, "c", c.c);
    get_opt(j, "eps", c.eps);
    get_opt(j, "M_z", c.M_z);
    get_opt(j, "minibatch", c.minibatch);
    get_opt(j, "x_lo", c.x_lo);
    get_opt(j, "x_hi", c.x_hi);
    if (j.contains("stage2")) from_json_into(j.at("stage2"), c.stage2);
}

inline json to_json(const PpoConfig& c) {
    return {{"actor_hidden", c.actor_hidden},
            {"critic_hidden", c.critic_hidden},
            {"clip", c.clip},
            {"gae_lambda", c.gae_lambda},
            {"discount", c.discount},
            {"epochs_per_update", c.epochs_per_update},
            {"minibatch", c.minibatch},
            {"episodes_per_update", c.episodes_per_update},
            {"updates", c.updates},
            {"std_init", c.std_init},
            {"std_final", c.std_final},
            {"lr", c.lr},
            {"max_grad_norm", c.max_grad_norm},
            {"eval_every", c.eval_every},
            {"ring", c.ring},
            {"seed", c.seed}};
}

inline void from_json_into(const json& j, PpoConfig& c) {
    get_opt(j, "actor_hidden", c.actor_hidden);
    get_opt(j, "critic_hidden", c.critic_hidden);
    get_opt(j, "clip", c.clip);
    get_opt(j, "gae_lambda", c.gae_lambda);
    get_opt(j, "discount", c.discount);
    get_opt(j, "epochs_per_update", c.epochs_per_update);
    get_opt(j, "minibatch", c.minibatch);
    get_opt(j, "episodes_per_update", c.episodes_per_update);
    get_opt(j, "updates", c.updates);
    get_opt(j, "std_init", c.std_init);
    get_opt(j, "std_final", c.std_final);
    get_opt(j, "lr", c.lr);
    get_opt(j, "max_grad_norm", c.max_grad_norm);
    get_opt(j, "eval_every", c.eval_every);
    get_opt(j, "ring", c.ring);
    get_opt(j, "seed", c.seed);
}

// CSV output. Floats carry 17 significant digits so every value round-trips.

inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

using CsvCell = std::variant<double, long long, std::string>;

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string o = "\"";
    for (char c : s) {
        if (c == '"') o += '"';
        o += c;
    }
    return o + "\"";
}

inline std::string csv_line(const std::vector<CsvCell>& cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) line += ',';
        if (const auto* d = std::get_if<double>(&cells[i]))
            line += fmt_double(*d);
        else if (const auto* n = std::get_if<long long>(&cells[i]))
            line += std::to_string(*n);
        else
            line += csv_escape(std::get<std::string>(cells[i]));
    }
    return line;
}

inline std::string csv_line(const std::vector<std::string>& header) {
    std::vector<CsvCell> c(header.begin(), header.end());
    return csv_line(c);
}

/// Appends rows to a CSV file, writing the header when the file is new or empty.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header, bool append = false) : header_(header) {
        const auto dir = std::filesystem::path(path).parent_path();
        if (!dir.empty()) std::filesystem::create_directories(dir);
        const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
        out_.open(path, append ? std::ios::app : std::ios::trunc);
        if (!out_) throw std::runtime_error("cannot write " + path);
        if (fresh) out_ << csv_line(header) << "\n";
    }

    void row(const std::vector<CsvCell>& cells) {
        if (cells.size() != header_.size())
            throw std::invalid_argument("CsvWriter: row has " + std::to_string(cells.size()) + " cells, header has " +
                                        std::to_string(header_.size()));
        out_ << csv_line(cells) << "\n";
        out_.flush();
    }

private:
    std::vector<std::string> header_;
    std::ofstream out_;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

/// Whole file as (header, rows); a missing file gives empty results.
inline std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>> read_csv(const std::string& path) {
    std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>> res;
    std::ifstream in(path);
    if (!in) return res;
    std::string line;
    if (std::getline(in, line)) res.first = split_csv_line(line);
    while (std::getline(in, line))
        if (!line.empty()) res.second.push_back(split_csv_line(line));
    return res;
}

inline const std::vector<std::string> kTrainLogHeader{"epoch", "J", "grad_norm", "skip_count"};

inline void write_train_log(const std::string& path, const std::vector<TrainLogRow>& log) {
    CsvWriter w(path, kTrainLogHeader);
    for (const auto& r : log)
        w.row({static_cast<long long>(r.epoch), r.J, r.grad_norm, static_cast<long long>(r.skip_count)});
}

inline const std::vector<std::string> kDistillLogHeader{"epoch",     "lambda",      "lambda_eff", "L_main",
                                                        "L_distill", "buffer_size", "rejected"};

inline void write_distill_log(const std::string& path, const std::vector<DistillLogRow>& log) {
    CsvWriter w(path, kDistillLogHeader);
    for (const auto& r : log)
        w.row({static_cast<long long>(r.epoch), r.lambda, r.lambda_eff, r.L_main, r.L_distill,
               static_cast<long long>(r.buffer_size), static_cast<long long>(r.rejected)});
}

inline const std::vector<std::string> kPpoLogHeader{"update",      "mean_terminal_utility", "actor_loss",
                                                    "critic_loss", "action_std",            "n_flagged",
                                                    "skipped"};

inline void write_ppo_log(const std::string& path, const std::vector<PpoLogRow>& log) {
    CsvWriter w(path, kPpoLogHeader);
    for (const auto& r : log)
        w.row({static_cast<long long>(r.update), r.mean_terminal_utility, r.actor_loss, r.critic_loss, r.action_std,
               static_cast<long long>(r.n_flagged), static_cast<long long>(r.skipped)});
}

/// Per-query Stage 2 diagnostics; `tag` identifies the run (cell, method, snapshot).
inline const std::vector<std::string> kStage2DiagHeader{
    "tag",       "query",        "k",         "x",        "residual_norm", "denom_q50", "kappa_med",
    "bad_sign_frac", "cond_A",   "lambda",    "fallback", "reason",        "pi"};

inline std::string join_vector(const VectorXd& v) {
    std::string s;
    for (Index i = 0; i < v.size(); ++i) s += (i ? ";" : "") + fmt_double(v(i));
    return s;
}

inline void append_stage2_diag(CsvWriter& w, const std::string& tag, const Stage2Result& res) {
    for (std::size_t q = 0; q < res.rules.size(); ++q) {
        const auto& dg = res.diags[q];
        const auto& rule = res.rules[q];
        w.row({tag, static_cast<long long>(q), static_cast<long long>(res.queries[q].k), res.queries[q].x,
               dg.residual_norm, dg.denom_q50, dg.kappa_med, dg.bad_sign_frac, dg.cond_A, rule.lambda,
               static_cast<long long>(rule.fallback), dg.reason, join_vector(rule.pi)});
    }
}

/// Wealth paths and allocations of a few episodes, one row per (episode, step).
inline void write_trajectories(const std::string& path, const TrajectoryBundle& tb, const RolloutConfig& rc,
                               int max_episodes) {
    const int d = tb.pi.empty() ? 0 : static_cast<int>(tb.pi[0].rows());
    std::vector<std::string> header{"episode", "step", "t", "x"};
    for (int a = 0; a < d; ++a) header.push_back("pi_" + std::to_string(a));
    CsvWriter w(path, header);
    const int E = std::min<int>(max_episodes, static_cast<int>(tb.X[0].size()));
    for (int e = 0; e < E; ++e)
        for (std::size_t k = 0; k < tb.X.size(); ++k) {
            std::vector<CsvCell> row{static_cast<long long>(e), static_cast<long long>(k),
                                     rc.time(static_cast<int>(k)), tb.X[k](e)};
            for (int a = 0; a < d; ++a) row.push_back(k < tb.pi.size() ? tb.pi[k](a, e) : std::nan(""));
            w.row(row);
        }
}

}  // namespace ppgdpo
