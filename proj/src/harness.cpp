#include "treeflow/harness.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace treeflow {

namespace {

namespace fs = std::filesystem;

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f.good()) throw TrainError("cannot write '" + path + "'");
  f << content;
}

}  // namespace

ReplayState::ReplayState(const RunConfig& cfg, const Env& env)
    : kind_(cfg.replay), cfg_(cfg), rp_(cfg.rp_capacity, cfg.rp_near_dup_tol) {
  if (kind_ == "oracle") y_star_ = env.solution_set();
}

int ReplayState::available() const {
  if (kind_ == "none") return 0;
  if (kind_ == "oracle") return static_cast<int>(y_star_.size());
  if (kind_ == "subm") return static_cast<int>(subm_buffer_.size());
  return rp_.size();
}

const std::vector<ReplayItem>& ReplayState::items() const {
  if (kind_ == "subm") return subm_buffer_;
  return rp_.items();
}

std::vector<std::vector<int>> ReplayState::draw(int n, Rng& rng) const {
  std::vector<std::vector<int>> out;
  out.reserve(n);
  if (kind_ == "oracle") {
    return oracle_sample(y_star_, n, rng);
  }
  if (kind_ == "prt") {
    for (ReplayItem& it : prt_sample(rp_.items(), n, cfg_.prt_alpha_frac,
                                     cfg_.prt_beta_tier, rng))
      out.push_back(std::move(it.tokens));
    return out;
  }
  if (kind_ == "subm") {
    for (int i = 0; i < n; ++i)
      out.push_back(subm_buffer_[rng.uniform_int(static_cast<int>(subm_buffer_.size()))].tokens);
    return out;
  }
  for (ReplayItem& it : rp_.sample(n, rng)) out.push_back(std::move(it.tokens));
  return out;
}

void ReplayState::offer(const std::vector<int>& tokens, double reward, bool valid) {
  if (kind_ == "none" || kind_ == "oracle") return;
  ReplayItem item = ReplayItem::make(tokens, reward, valid, cfg_.subm.length_bin_size);
  if (kind_ == "subm")
    subm_pending_.push_back(std::move(item));
  else
    rp_.insert(std::move(item));
}

void ReplayState::refresh() {
  if (kind_ != "subm" || subm_pending_.empty()) return;
  SubmResult res = subm_refresh(subm_buffer_, subm_pending_, cfg_.subm);
  subm_buffer_ = std::move(res.selected);
  subm_pending_.clear();
}

std::vector<Rollout> build_batch(const PolicyParams& params, const Env& env,
                                 ReplayState& replay, const RunConfig& cfg, long step,
                                 Rng& rng, BatchStats* stats) {
  int n = cfg.n_samples;
  double frac = cfg.replay_fraction_const >= 0.0 ? cfg.replay_fraction_const
                                                 : cfg.replay_fraction.value(step);
  int want_replay = cfg.replay == "none" ? 0 : static_cast<int>(std::lround(frac * n));
  want_replay = std::clamp(want_replay, 0, n);
  int n_replay = replay.available() > 0 ? want_replay : 0;

  std::vector<Rollout> batch;
  batch.reserve(n);
  if (n_replay > 0)
    for (auto& tokens : replay.draw(n_replay, rng))
      batch.push_back(score_trajectory(params, env, tokens));

  for (int i = n_replay; i < n; ++i) {
    double temp = rng.uniform() < cfg.low_temp_prob ? cfg.temp_lo.value(step)
                                                    : cfg.temp_hi.value(step);
    Rollout r = sample_trajectory(params, env, temp, rng);
    replay.offer(r.traj.tokens, r.traj.u.back(), env.metric_valid(r.traj.tokens));
    batch.push_back(std::move(r));
  }

  if (stats) {
    stats->n_replay = n_replay;
    stats->n_onpolicy = n - n_replay;
    stats->replay_fallbacks = want_replay - n_replay;
  }
  return batch;
}

std::vector<EvalSample> evaluate_policy(const PolicyParams& params, const Env& env, int n,
                                        Rng& rng) {
  std::vector<EvalSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Rollout r = sample_trajectory(params, env, 1.0, rng);
    EvalSample s;
    s.valid = env.metric_valid(r.traj.tokens);
    s.score = env.metric_score(r.traj.tokens);
    s.log_pterm_at_stop = r.traj.log_pterm.back();
    s.tokens = std::move(r.traj.tokens);
    out.push_back(std::move(s));
  }
  return out;
}

TrainResult train(const RunConfig& cfg, const std::string& outdir) {
  std::unique_ptr<Env> env = make_env(cfg);
  Rng init_rng(Rng::derive_seed(cfg.seed, 0x1234));
  PolicyParams params =
      PolicyParams::init(env->vocab_size(), cfg.embed_dim, cfg.hidden_dim, init_rng);
  OptimState opt(params.size(), cfg.optim);
  ReplayState replay(cfg, *env);
  Rng train_rng(Rng::derive_seed(cfg.seed, 0x5678));
  std::vector<std::vector<int>> y_star = env->solution_set();

  bool emit = !outdir.empty();
  std::ofstream metrics_csv, train_log, per_depth;
  if (emit) {
    fs::create_directories(outdir);
    write_file(outdir + "/config_resolved.json", config_to_json(cfg).dump(2) + "\n");
    metrics_csv.open(outdir + "/metrics.csv", std::ios::binary);
    metrics_csv << metrics_csv_header();
    train_log.open(outdir + "/train_log.csv", std::ios::binary);
    train_log << "step,loss,logz,grad_norm,n_replay\n";
    per_depth.open(outdir + "/per_depth.jsonl", std::ios::binary);
    write_file(outdir + "/ckpt_init.json", params.to_json());
  }

  RaptbConfig raptb = cfg.raptb;
  SubtbConfig subtb = cfg.subtb;
  Objective obj = objective_from_string(cfg.objective);

  TrainResult result{params, {}, 0.0, 0};
  MetricsReport last_report;
  bool have_report = false;

  auto run_eval = [&](long step) {
    Rng eval_rng(Rng::derive_seed(cfg.seed, 0xE7A1 + static_cast<std::uint64_t>(step)));
    std::vector<EvalSample> samples =
        evaluate_policy(params, *env, cfg.eval_samples, eval_rng);
    MetricsReport m =
        compute_metrics(samples, y_star, params.n_actions(), env->max_len());
    if (emit) {
      metrics_csv << metrics_csv_row(step, m, params.log_z(), result.final_loss);
      metrics_csv.flush();
      per_depth << per_depth_json(step, m) << "\n";
      per_depth.flush();
      write_file(outdir + "/ckpt_" + std::to_string(step) + ".json", params.to_json());
    }
    last_report = m;
    have_report = true;
  };

  for (long step = 0; step < cfg.max_steps; ++step) {
    raptb.k_min = cfg.k_min_sched.value_int(step);
    std::vector<double> grad(params.size(), 0.0);
    double loss = 0.0;
    BatchStats stats_total;
    for (int micro = 0; micro < cfg.grad_accum; ++micro) {
      BatchStats stats;
      std::vector<Rollout> batch =
          build_batch(params, *env, replay, cfg, step, train_rng, &stats);
      LossOutput out = compute_loss(obj, params, batch, raptb, subtb);
      loss += out.loss / cfg.grad_accum;
      for (std::size_t i = 0; i < grad.size(); ++i)
        grad[i] += out.grad[i] / cfg.grad_accum;
      stats_total.n_replay += stats.n_replay;
      stats_total.replay_fallbacks += stats.replay_fallbacks;
    }
    if (!std::isfinite(loss)) {
      if (emit) {
        nlohmann::json diag = {{"step", step},
                               {"loss", "non-finite"},
                               {"log_z", params.log_z()}};
        write_file(outdir + "/abort_diagnostics.json", diag.dump(2) + "\n");
      }
      throw TrainError("non-finite loss at step " + std::to_string(step));
    }
    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    gnorm = std::sqrt(gnorm);
    try {
      opt.step(params, grad);
    } catch (const PolicyError& e) {
      if (emit) {
        nlohmann::json diag = {{"step", step}, {"error", e.what()}, {"log_z", params.log_z()}};
        write_file(outdir + "/abort_diagnostics.json", diag.dump(2) + "\n");
      }
      throw TrainError(std::string("optimizer abort: ") + e.what());
    }
    if ((step + 1) % cfg.subm_refresh_period == 0) replay.refresh();

    result.final_loss = loss;
    result.steps_run = step + 1;
    if (emit) {
      char row[160];
      std::snprintf(row, sizeof row, "%ld,%.10g,%.10g,%.10g,%d\n", step, loss,
                    params.log_z(), gnorm, stats_total.n_replay);
      train_log << row;
    }
    if ((step + 1) % cfg.eval_period == 0 && step + 1 != cfg.max_steps) run_eval(step + 1);
  }

  // Final evaluation always runs, covering max_steps = 0 as well.
  run_eval(cfg.max_steps);
  if (emit) {
    write_file(outdir + "/ckpt_final.json", params.to_json());
    write_file(outdir + "/buffer_final.txt", serialize_items(replay.items(), env->vocab()));
  }
  result.params = params;
  if (have_report) result.final_metrics = last_report;
  return result;
}

}  // namespace treeflow
