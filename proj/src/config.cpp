#include "videodirector/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "videodirector/error.hpp"

namespace vdir {
namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) fail(ErrorKind::format, "config: '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.contains(key)) {
      fail(ErrorKind::format,
           "config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

SessionConfig SessionConfig::parse(const std::string& text) {
  json root;
  try {
    root = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("config: ") + e.what());
  }
  SessionConfig c;
  try {
    check_keys(root, "", {"schedule", "stdg", "control", "tune", "omega", "seed"});
    read(root, "omega", c.omega);
    read(root, "seed", c.seed);

    if (root.contains("schedule")) {
      const json& s = root["schedule"];
      check_keys(s, "schedule", {"num_train_steps", "beta_start", "beta_end", "steps"});
      ScheduleParams p;
      read(s, "num_train_steps", p.num_train_steps);
      read(s, "beta_start", p.beta_start);
      read(s, "beta_end", p.beta_end);
      read(s, "steps", p.num_sampling_steps);
      c.schedule = p;
    }

    if (root.contains("stdg")) {
      const json& s = root["stdg"];
      check_keys(s, "stdg", {"enabled", "eta_f", "eta_b", "zeta_f", "zeta_b", "top_k", "scale",
                             "blocks", "background_edit", "editing"});
      read(s, "enabled", c.stdg_enabled);
      read(s, "editing", c.stdg_editing);
      read(s, "eta_f", c.stdg.eta_f);
      read(s, "eta_b", c.stdg.eta_b);
      read(s, "zeta_f", c.stdg.zeta_f);
      read(s, "zeta_b", c.stdg.zeta_b);
      read(s, "top_k", c.stdg.top_k);
      read(s, "scale", c.stdg.scale);
      read(s, "blocks", c.stdg.blocks);
      bool background_edit = false;
      read(s, "background_edit", background_edit);
      if (background_edit) c.stdg = c.stdg.swapped();
    }

    if (root.contains("control")) {
      const json& s = root["control"];
      check_keys(s, "control", {"tau_s", "tau_c", "sa1", "sa2", "ca", "renormalize", "reweight"});
      read(s, "tau_s", c.control.tau_s);
      read(s, "tau_c", c.control.tau_c);
      read(s, "sa1", c.flags.sa1);
      read(s, "sa2", c.flags.sa2);
      read(s, "ca", c.flags.ca);
      read(s, "renormalize", c.flags.renormalize);
      if (s.contains("reweight")) {
        const json& r = s["reweight"];
        if (!r.is_object()) fail(ErrorKind::format, "config: control.reweight must map words to C");
        for (const auto& [word, value] : r.items()) {
          c.reweight.emplace_back(word, value.get<double>());
        }
      }
    }

    if (root.contains("tune")) {
      const json& s = root["tune"];
      check_keys(s, "tune",
                 {"inner_iters", "step_size", "early_stop_loss", "max_halvings", "optimizer", "mode"});
      read(s, "inner_iters", c.tune.inner_iters);
      read(s, "step_size", c.tune.step_size);
      read(s, "early_stop_loss", c.tune.early_stop_loss);
      read(s, "max_halvings", c.tune.max_halvings);
      if (s.contains("optimizer")) c.tune.optimizer = parse_optimizer(s["optimizer"].get<std::string>());
      if (s.contains("mode")) c.tune.mode = parse_mode(s["mode"].get<std::string>());
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("config: ") + e.what());
  }

  if (c.schedule) c.schedule->make();  // validates
  c.control.validate();
  for (const auto& [word, value] : c.reweight) {
    require(value > 0.0, ErrorKind::validation, "config: reweight for '" + word + "' must be > 0");
  }
  c.tune_config().validate();
  return c;
}

SessionConfig SessionConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

TuneConfig SessionConfig::tune_config() const {
  TuneConfig t = tune;
  t.omega = omega;
  t.stdg = stdg;
  t.stdg_enabled = stdg_enabled;
  return t;
}

void SessionConfig::check_schedule(const ScheduleParams& actual) const {
  if (schedule && !(*schedule == actual)) {
    fail(ErrorKind::validation,
         "config schedule differs from the trajectory's (" +
             std::to_string(actual.num_train_steps) + " train steps, " +
             std::to_string(actual.num_sampling_steps) + " sampling steps)");
  }
}

}  // namespace vdir
