#include "treeflow/config.hpp"

#include <cmath>
#include <fstream>

namespace treeflow {

double LinearSched::value(long step) const {
  if (horizon <= 0) return end;
  double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(horizon));
  return start + (end - start) * t;
}

int LinearSched::value_int(long step) const {
  return static_cast<int>(std::round(value(step)));
}

namespace {

nlohmann::json sched_json(const LinearSched& s) {
  return {{"start", s.start}, {"end", s.end}, {"horizon", s.horizon}};
}

LinearSched sched_from(const nlohmann::json& j) {
  LinearSched s;
  s.start = j.at("start").get<double>();
  s.end = j.at("end").get<double>();
  s.horizon = j.at("horizon").get<long>();
  if (s.horizon <= 0) throw ConfigError("scheduler horizon must be positive");
  return s;
}

// Every key present in `given` must exist in `schema`; recurse into objects.
// Free-form maps (tinytree rewards) are exempted by their path.
void check_unknown_keys(const nlohmann::json& given, const nlohmann::json& schema,
                        const std::string& path) {
  if (!given.is_object() || !schema.is_object()) return;
  if (path == "env.tinytree.rewards") return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    std::string sub = path.empty() ? it.key() : path + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + sub + "'");
    check_unknown_keys(it.value(), schema.at(it.key()), sub);
  }
}

}  // namespace

nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["objective"] = c.objective;
  j["replay"] = c.replay;
  j["seed"] = c.seed;
  j["max_steps"] = c.max_steps;
  j["n_samples"] = c.n_samples;
  j["grad_accum"] = c.grad_accum;
  j["eval_period"] = c.eval_period;
  j["eval_samples"] = c.eval_samples;
  j["policy"] = {{"embed_dim", c.embed_dim}, {"hidden_dim", c.hidden_dim}};
  j["optim"] = {{"lr", c.optim.lr},
                {"beta1", c.optim.beta1},
                {"beta2", c.optim.beta2},
                {"eps", c.optim.eps},
                {"weight_decay", c.optim.weight_decay},
                {"grad_clip", c.optim.grad_clip}};
  j["sampling"] = {{"temp_hi", sched_json(c.temp_hi)},
                   {"temp_lo", sched_json(c.temp_lo)},
                   {"low_temp_prob", c.low_temp_prob}};
  j["replay_cfg"] = {
      {"fraction", sched_json(c.replay_fraction)},
      {"fraction_const", c.replay_fraction_const},
      {"rp", {{"capacity", c.rp_capacity}, {"near_dup_tol", c.rp_near_dup_tol}}},
      {"prt", {{"alpha_frac", c.prt_alpha_frac}, {"beta_tier", c.prt_beta_tier}}},
      {"subm",
       {{"capacity", c.subm.capacity},
        {"w_rew", c.subm.w_rew},
        {"w_val", c.subm.w_val},
        {"w_div", c.subm.w_div},
        {"w_len", c.subm.w_len},
        {"length_bin_size", c.subm.length_bin_size},
        {"alpha_b", c.subm.alpha_b},
        {"validity_gating_ratio", c.subm.validity_gating_ratio},
        {"refresh_period", c.subm_refresh_period}}}};
  nlohmann::json tiny;
  tiny["vocab"] = c.tinytree.vocab;
  tiny["rewards"] = c.tinytree.rewards;
  j["env"] = {{"kind", c.env_kind},
              {"min_len", c.env.min_len},
              {"max_len", c.env.max_len},
              {"kappa", c.env.kappa},
              {"lambda", c.env.lambda},
              {"target_num", c.env.target.num()},
              {"target_den", c.env.target.den()},
              {"tinytree", tiny}};
  j["raptb"] = {{"eta", c.raptb.eta},
                {"alpha", c.raptb.alpha},
                {"beta", c.raptb.beta},
                {"rho", c.raptb.rho},
                {"gamma", c.raptb.gamma},
                {"k_min", sched_json(c.k_min_sched)},
                {"horizon_cap", c.raptb.horizon_cap},
                {"absorb_gate", c.raptb.absorb_gate},
                {"detach_pterm", c.raptb.detach_pterm},
                {"absorb", c.raptb.absorb},
                {"w_k", c.raptb.w_k}};
  j["subtb"] = {{"w_l", c.subtb.w_l}};
  return j;
}

RunConfig config_from_json(const nlohmann::json& given) {
  RunConfig c;
  nlohmann::json schema = config_to_json(c);
  check_unknown_keys(given, schema, "");
  // Merge user values over defaults, then read the merged tree.
  nlohmann::json j = schema;
  j.merge_patch(given);

  c.objective = j.at("objective").get<std::string>();
  objective_from_string(c.objective);  // validates
  c.replay = j.at("replay").get<std::string>();
  if (c.replay != "none" && c.replay != "rp" && c.replay != "prt" && c.replay != "subm" &&
      c.replay != "oracle")
    throw ConfigError("unknown replay strategy '" + c.replay + "'");
  c.seed = j.at("seed").get<long>();
  c.max_steps = j.at("max_steps").get<long>();
  c.n_samples = j.at("n_samples").get<int>();
  c.grad_accum = j.at("grad_accum").get<int>();
  c.eval_period = j.at("eval_period").get<long>();
  c.eval_samples = j.at("eval_samples").get<int>();
  if (c.max_steps < 0 || c.n_samples < 1 || c.grad_accum < 1 || c.eval_period < 1 ||
      c.eval_samples < 1)
    throw ConfigError("step/batch/eval settings must be positive");

  c.embed_dim = j.at("policy").at("embed_dim").get<int>();
  c.hidden_dim = j.at("policy").at("hidden_dim").get<int>();
  const auto& opt = j.at("optim");
  c.optim.lr = opt.at("lr").get<double>();
  c.optim.beta1 = opt.at("beta1").get<double>();
  c.optim.beta2 = opt.at("beta2").get<double>();
  c.optim.eps = opt.at("eps").get<double>();
  c.optim.weight_decay = opt.at("weight_decay").get<double>();
  c.optim.grad_clip = opt.at("grad_clip").get<double>();

  const auto& samp = j.at("sampling");
  c.temp_hi = sched_from(samp.at("temp_hi"));
  c.temp_lo = sched_from(samp.at("temp_lo"));
  c.low_temp_prob = samp.at("low_temp_prob").get<double>();
  if (c.low_temp_prob < 0 || c.low_temp_prob > 1)
    throw ConfigError("low_temp_prob must lie in [0, 1]");

  const auto& rep = j.at("replay_cfg");
  c.replay_fraction = sched_from(rep.at("fraction"));
  c.replay_fraction_const = rep.at("fraction_const").get<double>();
  c.rp_capacity = rep.at("rp").at("capacity").get<int>();
  c.rp_near_dup_tol = rep.at("rp").at("near_dup_tol").get<double>();
  c.prt_alpha_frac = rep.at("prt").at("alpha_frac").get<double>();
  c.prt_beta_tier = rep.at("prt").at("beta_tier").get<double>();
  const auto& sm = rep.at("subm");
  c.subm.capacity = sm.at("capacity").get<int>();
  c.subm.w_rew = sm.at("w_rew").get<double>();
  c.subm.w_val = sm.at("w_val").get<double>();
  c.subm.w_div = sm.at("w_div").get<double>();
  c.subm.w_len = sm.at("w_len").get<double>();
  c.subm.length_bin_size = sm.at("length_bin_size").get<int>();
  c.subm.alpha_b = sm.at("alpha_b").get<std::vector<double>>();
  c.subm.validity_gating_ratio = sm.at("validity_gating_ratio").get<double>();
  c.subm_refresh_period = sm.at("refresh_period").get<int>();
  if (c.subm.capacity < 1) throw ConfigError("subm capacity must be at least 1");
  if (c.subm.w_rew < 0 || c.subm.w_val < 0 || c.subm.w_div < 0 || c.subm.w_len < 0)
    throw ConfigError("subm weights must be non-negative");

  const auto& env = j.at("env");
  c.env_kind = env.at("kind").get<std::string>();
  if (c.env_kind != "expr24" && c.env_kind != "tinytree")
    throw ConfigError("unknown env kind '" + c.env_kind + "'");
  c.env.min_len = env.at("min_len").get<int>();
  c.env.max_len = env.at("max_len").get<int>();
  c.env.kappa = env.at("kappa").get<double>();
  c.env.lambda = env.at("lambda").get<double>();
  c.env.target = Rational(env.at("target_num").get<long>(), env.at("target_den").get<long>());
  c.tinytree.vocab = env.at("tinytree").at("vocab").get<std::vector<std::string>>();
  c.tinytree.rewards =
      env.at("tinytree").at("rewards").get<std::map<std::string, double>>();

  const auto& rap = j.at("raptb");
  c.raptb.eta = rap.at("eta").get<double>();
  c.raptb.alpha = rap.at("alpha").get<double>();
  c.raptb.beta = rap.at("beta").get<double>();
  c.raptb.rho = rap.at("rho").get<double>();
  c.raptb.gamma = rap.at("gamma").get<double>();
  c.k_min_sched = sched_from(rap.at("k_min"));
  c.raptb.horizon_cap = rap.at("horizon_cap").get<int>();
  c.raptb.absorb_gate = rap.at("absorb_gate").get<double>();
  c.raptb.detach_pterm = rap.at("detach_pterm").get<bool>();
  c.raptb.absorb = rap.at("absorb").get<bool>();
  c.raptb.w_k = rap.at("w_k").get<std::vector<double>>();
  if (c.raptb.alpha < 0 || c.raptb.alpha > 1) throw ConfigError("raptb.alpha must be in [0,1]");
  if (!(c.raptb.beta > 0)) throw ConfigError("raptb.beta must be positive");
  if (c.raptb.rho < 0) throw ConfigError("raptb.rho must be non-negative");
  if (!(c.raptb.gamma > 0) || c.raptb.gamma > 1)
    throw ConfigError("raptb.gamma must lie in (0,1]");

  c.subtb.w_l = j.at("subtb").at("w_l").get<std::vector<double>>();
  for (double w : c.subtb.w_l)
    if (w < 0) throw ConfigError("subtb.w_l entries must be non-negative");

  return c;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f.good()) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like key.path=value: '" + assignment + "'");
  std::string path = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);

  nlohmann::json parsed;
  try {
    parsed = nlohmann::json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;  // plain string
  }

  nlohmann::json* node = &j;
  std::size_t pos = 0;
  while (true) {
    std::size_t dot = path.find('.', pos);
    std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw ConfigError("empty key segment in override '" + assignment + "'");
    if (dot == std::string::npos) {
      (*node)[key] = parsed;
      break;
    }
    node = &(*node)[key];
    pos = dot + 1;
  }
}

std::unique_ptr<Env> make_env(const RunConfig& cfg) {
  if (cfg.env_kind == "expr24") return std::make_unique<Expr24Env>(cfg.env);
  return std::make_unique<TinyTreeEnv>(cfg.tinytree.vocab, cfg.env.min_len, cfg.env.max_len,
                                       cfg.tinytree.rewards);
}

}  // namespace treeflow
