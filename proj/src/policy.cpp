#include "treeflow/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <json.hpp>

namespace treeflow {

namespace {

void matvec(std::span<const double> m, int rows, int cols, const double* v, double* out) {
  for (int i = 0; i < rows; ++i) {
    const double* mr = m.data() + static_cast<std::size_t>(i) * cols;
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += mr[j] * v[j];
    out[i] = s;
  }
}

// out += m^T * v  (m is rows x cols, v has rows entries, out has cols)
void matvec_t_add(std::span<const double> m, int rows, int cols, const double* v, double* out) {
  for (int i = 0; i < rows; ++i) {
    const double* mr = m.data() + static_cast<std::size_t>(i) * cols;
    double vi = v[i];
    if (vi == 0.0) continue;
    for (int j = 0; j < cols; ++j) out[j] += vi * mr[j];
  }
}

// grad[rows x cols] += u (rows) outer v (cols), times scale
void outer_add(std::span<double> grad, int rows, int cols, const double* u, const double* v,
               double scale) {
  for (int i = 0; i < rows; ++i) {
    double ui = u[i] * scale;
    if (ui == 0.0) continue;
    double* gr = grad.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) gr[j] += ui * v[j];
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

PolicyParams::PolicyParams(int vocab_size, int embed_dim, int hidden_dim)
    : vocab_(vocab_size), emb_(embed_dim), hid_(hidden_dim) {
  register_tensors();
}

void PolicyParams::register_tensors() {
  specs_.clear();
  std::size_t off = 0;
  auto add = [&](const char* name, int rows, int cols, bool decay) {
    specs_.push_back(TensorSpec{name, rows, cols, decay, off});
    off += static_cast<std::size_t>(rows) * cols;
  };
  add("embed", vocab_ + 2, emb_, true);  // tokens, BOS, stop (stop unused as input)
  add("w_xz", hid_, emb_, true);
  add("w_hz", hid_, hid_, true);
  add("b_z", 1, hid_, false);
  add("w_xr", hid_, emb_, true);
  add("w_hr", hid_, hid_, true);
  add("b_r", 1, hid_, false);
  add("w_xn", hid_, emb_, true);
  add("b_xn", 1, hid_, false);
  add("w_hn", hid_, hid_, true);
  add("b_hn", 1, hid_, false);
  add("w_out", vocab_ + 1, hid_, true);
  add("b_out", 1, vocab_ + 1, false);
  add("log_z", 1, 1, false);
  data_.assign(off, 0.0);
}

PolicyParams PolicyParams::init(int vocab_size, int embed_dim, int hidden_dim, Rng& rng) {
  PolicyParams p(vocab_size, embed_dim, hidden_dim);
  for (const TensorSpec& spec : p.specs_) {
    if (spec.name == "w_out" || spec.name == "b_out" || spec.name == "log_z" ||
        spec.name[0] == 'b')
      continue;  // output head, biases, and logZ start at zero
    std::span<double> t = p.tensor(spec.name);
    for (double& x : t) x = rng.uniform() * 0.2 - 0.1;
  }
  return p;
}

std::span<double> PolicyParams::tensor(const std::string& name) {
  for (const TensorSpec& s : specs_)
    if (s.name == name)
      return {data_.data() + s.offset, static_cast<std::size_t>(s.rows) * s.cols};
  throw PolicyError("unknown tensor '" + name + "'");
}

std::span<const double> PolicyParams::tensor(const std::string& name) const {
  for (const TensorSpec& s : specs_)
    if (s.name == name)
      return {data_.data() + s.offset, static_cast<std::size_t>(s.rows) * s.cols};
  throw PolicyError("unknown tensor '" + name + "'");
}

std::string PolicyParams::to_json() const {
  nlohmann::json j;
  j["format_version"] = 1;
  j["vocab_size"] = vocab_;
  j["embed_dim"] = emb_;
  j["hidden_dim"] = hid_;
  nlohmann::json tensors;
  for (const TensorSpec& s : specs_) {
    std::span<const double> t = tensor(s.name);
    tensors[s.name] = std::vector<double>(t.begin(), t.end());
  }
  j["tensors"] = tensors;
  return j.dump(2);
}

PolicyParams PolicyParams::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.at("format_version").get<int>() != 1)
    throw PolicyError("unsupported checkpoint format version");
  PolicyParams p(j.at("vocab_size").get<int>(), j.at("embed_dim").get<int>(),
                 j.at("hidden_dim").get<int>());
  for (const TensorSpec& s : p.specs_) {
    auto vals = j.at("tensors").at(s.name).get<std::vector<double>>();
    std::span<double> t = p.tensor(s.name);
    if (vals.size() != t.size()) throw PolicyError("checkpoint tensor size mismatch: " + s.name);
    std::copy(vals.begin(), vals.end(), t.begin());
  }
  return p;
}

namespace {

StepCache gru_step(const PolicyParams& params, int input_row, const std::vector<double>& h_prev) {
  int hid = params.hidden_dim();
  int emb = params.embed_dim();
  int n_act = params.n_actions();
  StepCache c;
  c.input_row = input_row;
  c.h_prev = h_prev;
  const double* x = params.tensor("embed").data() + static_cast<std::size_t>(input_row) * emb;

  std::vector<double> tmp(hid), tmp2(hid);
  auto gate = [&](const char* wx, const char* wh, const char* b, std::vector<double>& out) {
    matvec(params.tensor(wx), hid, emb, x, tmp.data());
    matvec(params.tensor(wh), hid, hid, h_prev.data(), tmp2.data());
    std::span<const double> bias = params.tensor(b);
    out.resize(hid);
    for (int i = 0; i < hid; ++i) out[i] = sigmoid(tmp[i] + tmp2[i] + bias[i]);
  };
  gate("w_xz", "w_hz", "b_z", c.z);
  gate("w_xr", "w_hr", "b_r", c.r);

  c.q.resize(hid);
  matvec(params.tensor("w_hn"), hid, hid, h_prev.data(), c.q.data());
  {
    std::span<const double> b_hn = params.tensor("b_hn");
    for (int i = 0; i < hid; ++i) c.q[i] += b_hn[i];
  }
  c.n.resize(hid);
  matvec(params.tensor("w_xn"), hid, emb, x, tmp.data());
  {
    std::span<const double> b_xn = params.tensor("b_xn");
    for (int i = 0; i < hid; ++i) c.n[i] = std::tanh(tmp[i] + b_xn[i] + c.r[i] * c.q[i]);
  }
  c.h.resize(hid);
  for (int i = 0; i < hid; ++i) c.h[i] = (1.0 - c.z[i]) * c.n[i] + c.z[i] * h_prev[i];

  std::vector<double> logits(n_act);
  matvec(params.tensor("w_out"), n_act, hid, c.h.data(), logits.data());
  {
    std::span<const double> b_out = params.tensor("b_out");
    for (int i = 0; i < n_act; ++i) logits[i] += b_out[i];
  }
  double mx = *std::max_element(logits.begin(), logits.end());
  double lse = 0.0;
  for (double v : logits) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  c.logp.resize(n_act);
  c.p.resize(n_act);
  for (int i = 0; i < n_act; ++i) {
    c.logp[i] = logits[i] - lse;
    c.p[i] = std::exp(c.logp[i]);
  }
  return c;
}

}  // namespace

SeqScore forward_states(const PolicyParams& params, std::span<const int> tokens) {
  for (int t : tokens)
    if (t < 0 || t >= params.vocab()) throw PolicyError("token id out of range");
  SeqScore score;
  std::vector<double> h(params.hidden_dim(), 0.0);
  score.steps.push_back(gru_step(params, params.bos_row(), h));
  for (std::size_t k = 0; k < tokens.size(); ++k)
    score.steps.push_back(gru_step(params, tokens[k], score.steps.back().h));
  return score;
}

Trajectory make_trajectory(const SeqScore& score, std::span<const int> tokens, const Env& env,
                           bool from_replay) {
  Trajectory traj;
  traj.tokens.assign(tokens.begin(), tokens.end());
  traj.from_replay = from_replay;
  int tau = traj.tau();
  traj.log_pf.resize(tau);
  traj.log_pterm.resize(tau + 1);
  int stop = static_cast<int>(score.steps[0].logp.size()) - 1;
  for (int k = 0; k <= tau; ++k) {
    traj.log_pterm[k] = score.steps[k].logp[stop];
    if (k < tau) traj.log_pf[k] = score.steps[k].logp[tokens[k]];
  }
  RewardArrays arrays = env.reward_arrays(tokens);
  traj.log_r = std::move(arrays.log_r);
  traj.u = std::move(arrays.u);
  traj.stop_legal = std::move(arrays.stop_legal);
  return traj;
}

Rollout sample_trajectory(const PolicyParams& params, const Env& env, double temp, Rng& rng) {
  if (!(temp > 0)) throw PolicyError("sample_trajectory: temperature must be positive");
  if (env.vocab_size() != params.vocab())
    throw PolicyError("sample_trajectory: vocab size mismatch");

  SeqScore score;
  std::vector<int> tokens;
  std::vector<double> h(params.hidden_dim(), 0.0);
  auto walk = env.walk();
  int stop = params.stop_action();

  while (true) {
    int input = tokens.empty() ? params.bos_row() : tokens.back();
    score.steps.push_back(gru_step(params, input, h));
    const StepCache& c = score.steps.back();
    h = c.h;

    LegalActions la = walk->legal();
    if (la.size() == 0)
      throw PolicyError("sample_trajectory: dead-end prefix (grammar/length bounds mismatch)");

    std::vector<int> actions = la.tokens;
    if (la.stop) actions.push_back(stop);
    // Temperature-scaled softmax over the legal set only.
    double mx = -std::numeric_limits<double>::infinity();
    for (int a : actions) mx = std::max(mx, c.logp[a]);
    std::vector<double> w(actions.size());
    for (std::size_t i = 0; i < actions.size(); ++i)
      w[i] = std::exp((c.logp[actions[i]] - mx) / temp);
    int pick = actions[rng.categorical(w)];

    if (pick == stop) break;
    tokens.push_back(pick);
    walk->push(pick);
  }

  Rollout out;
  out.traj = make_trajectory(score, tokens, env, false);
  out.score = std::move(score);
  return out;
}

Rollout score_trajectory(const PolicyParams& params, const Env& env,
                         std::span<const int> tokens) {
  Rollout out;
  out.score = forward_states(params, tokens);
  out.traj = make_trajectory(out.score, tokens, env, true);
  return out;
}

void backprop_sequence(const PolicyParams& params, const SeqScore& score,
                       std::span<const int> tokens, const LogGradCoeffs& coeffs, double scale,
                       std::vector<double>& grad) {
  if (grad.size() != params.size()) throw PolicyError("backprop: gradient size mismatch");
  int hid = params.hidden_dim();
  int emb = params.embed_dim();
  int n_act = params.n_actions();
  int tau = static_cast<int>(tokens.size());
  int stop = params.stop_action();

  auto spec_of = [&](const char* name) -> const TensorSpec& {
    for (const TensorSpec& s : params.tensors())
      if (s.name == name) return s;
    throw PolicyError("unknown tensor");
  };
  const TensorSpec& s_embed = spec_of("embed");
  const TensorSpec& s_wxz = spec_of("w_xz");
  const TensorSpec& s_whz = spec_of("w_hz");
  const TensorSpec& s_bz = spec_of("b_z");
  const TensorSpec& s_wxr = spec_of("w_xr");
  const TensorSpec& s_whr = spec_of("w_hr");
  const TensorSpec& s_br = spec_of("b_r");
  const TensorSpec& s_wxn = spec_of("w_xn");
  const TensorSpec& s_bxn = spec_of("b_xn");
  const TensorSpec& s_whn = spec_of("w_hn");
  const TensorSpec& s_bhn = spec_of("b_hn");
  const TensorSpec& s_wout = spec_of("w_out");
  const TensorSpec& s_bout = spec_of("b_out");

  auto gview = [&](const TensorSpec& s) {
    return std::span<double>(grad.data() + s.offset,
                             static_cast<std::size_t>(s.rows) * s.cols);
  };

  grad.back() += scale * coeffs.d_log_z;

  std::vector<double> dh(hid, 0.0);
  std::vector<double> glogits(n_act), dn(hid), dzv(hid), dpre_n(hid), dq(hid), drv(hid),
      dpre_z(hid), dpre_r(hid), dh_prev(hid), dx(emb);

  for (int k = tau; k >= 0; --k) {
    const StepCache& c = score.steps[k];

    // Gradient wrt log-probs at this prefix -> logits through log-softmax.
    double g_tok = (k < tau && k < static_cast<int>(coeffs.a.size())) ? coeffs.a[k] : 0.0;
    double g_stop = (k < static_cast<int>(coeffs.c.size())) ? coeffs.c[k] : 0.0;
    double gsum = g_tok + g_stop;
    for (int i = 0; i < n_act; ++i) glogits[i] = -gsum * c.p[i];
    if (k < tau) glogits[tokens[k]] += g_tok;
    glogits[stop] += g_stop;

    outer_add(gview(s_wout), n_act, hid, glogits.data(), c.h.data(), scale);
    {
      std::span<double> gb = gview(s_bout);
      for (int i = 0; i < n_act; ++i) gb[i] += scale * glogits[i];
    }
    matvec_t_add(params.tensor("w_out"), n_act, hid, glogits.data(), dh.data());

    // GRU cell backward.
    for (int i = 0; i < hid; ++i) {
      dn[i] = dh[i] * (1.0 - c.z[i]);
      dzv[i] = dh[i] * (c.h_prev[i] - c.n[i]);
      dh_prev[i] = dh[i] * c.z[i];
      dpre_n[i] = dn[i] * (1.0 - c.n[i] * c.n[i]);
      dq[i] = dpre_n[i] * c.r[i];
      drv[i] = dpre_n[i] * c.q[i];
      dpre_z[i] = dzv[i] * c.z[i] * (1.0 - c.z[i]);
      dpre_r[i] = drv[i] * c.r[i] * (1.0 - c.r[i]);
    }

    const double* x = params.row(s_embed, c.input_row);
    outer_add(gview(s_wxz), hid, emb, dpre_z.data(), x, scale);
    outer_add(gview(s_whz), hid, hid, dpre_z.data(), c.h_prev.data(), scale);
    outer_add(gview(s_wxr), hid, emb, dpre_r.data(), x, scale);
    outer_add(gview(s_whr), hid, hid, dpre_r.data(), c.h_prev.data(), scale);
    outer_add(gview(s_wxn), hid, emb, dpre_n.data(), x, scale);
    outer_add(gview(s_whn), hid, hid, dq.data(), c.h_prev.data(), scale);
    {
      std::span<double> gbz = gview(s_bz), gbr = gview(s_br), gbxn = gview(s_bxn),
                        gbhn = gview(s_bhn);
      for (int i = 0; i < hid; ++i) {
        gbz[i] += scale * dpre_z[i];
        gbr[i] += scale * dpre_r[i];
        gbxn[i] += scale * dpre_n[i];
        gbhn[i] += scale * dq[i];
      }
    }

    std::fill(dx.begin(), dx.end(), 0.0);
    matvec_t_add(params.tensor("w_xz"), hid, emb, dpre_z.data(), dx.data());
    matvec_t_add(params.tensor("w_xr"), hid, emb, dpre_r.data(), dx.data());
    matvec_t_add(params.tensor("w_xn"), hid, emb, dpre_n.data(), dx.data());
    {
      std::span<double> gemb = gview(s_embed);
      double* ge = gemb.data() + static_cast<std::size_t>(c.input_row) * emb;
      for (int j = 0; j < emb; ++j) ge[j] += scale * dx[j];
    }

    matvec_t_add(params.tensor("w_hz"), hid, hid, dpre_z.data(), dh_prev.data());
    matvec_t_add(params.tensor("w_hr"), hid, hid, dpre_r.data(), dh_prev.data());
    matvec_t_add(params.tensor("w_hn"), hid, hid, dq.data(), dh_prev.data());

    dh = dh_prev;
  }
}

void OptimState::step(PolicyParams& params, std::span<const double> grad) {
  if (grad.size() != m_.size()) throw PolicyError("optimizer: gradient size mismatch");
  double norm_sq = 0.0;
  for (double g : grad) {
    if (!std::isfinite(g)) throw PolicyError("optimizer: non-finite gradient");
    norm_sq += g * g;
  }
  double norm = std::sqrt(norm_sq);
  double clip_scale = (norm > cfg_.grad_clip && norm > 0.0) ? cfg_.grad_clip / norm : 1.0;

  ++t_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

  std::span<double> data = params.flat();
  for (std::size_t i = 0; i < data.size(); ++i) {
    double g = grad[i] * clip_scale;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
    double mh = m_[i] / bc1;
    double vh = v_[i] / bc2;
    data[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
  }
  if (cfg_.weight_decay != 0.0) {
    for (const TensorSpec& s : params.tensors()) {
      if (!s.decay) continue;
      double* p = data.data() + s.offset;
      std::size_t n = static_cast<std::size_t>(s.rows) * s.cols;
      for (std::size_t i = 0; i < n; ++i) p[i] -= cfg_.lr * cfg_.weight_decay * p[i];
    }
  }
}

}  // namespace treeflow
