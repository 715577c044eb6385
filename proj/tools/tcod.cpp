// tcod: collect / train / eval / sweep driver for the distillation lab.
//
//   tcod <subcommand> <config.ini> [--section.key=value ...]
//
// Every key of the config file can be overridden on the command line.
// Unknown keys, in the file or on the command line, are errors.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <tcod/tcod.hpp>

namespace fs = std::filesystem;
using namespace tcod;

namespace {

struct Settings {
  RunConfig run;
  std::string name = "run";
  std::string output_dir = "runs";
  std::string algo = "opd";
  std::string mode = "sync";
  std::string env_kind = "compounding_chain";
  std::string store_path;
  std::string checkpoint;
  std::string sweep;
  bool parallel = false;
};

Algo parse_algo(const std::string& s) {
  if (s == "opd") return Algo::OPD;
  if (s == "f2b") return Algo::F2B;
  if (s == "b2f") return Algo::B2F;
  if (s == "sft") return Algo::SFT;
  throw ConfigError("run.algo: expected opd, f2b, b2f or sft, got '" + s + "'");
}

void finalize(Settings& s) {
  s.run.algo = parse_algo(s.algo);
  if (s.mode == "sync")
    s.run.mode = Mode::Sync;
  else if (s.mode == "async")
    s.run.mode = Mode::Async;
  else
    throw ConfigError("runtime.mode: expected sync or async, got '" + s.mode + "'");
  if (s.env_kind == "compounding_chain")
    s.run.env.kind = EnvKind::CompoundingChain;
  else if (s.env_kind == "memory_lock")
    s.run.env.kind = EnvKind::MemoryLock;
  else
    throw ConfigError("env.kind: expected compounding_chain or memory_lock, got '" + s.env_kind + "'");
  if (s.store_path.empty()) s.store_path = (fs::path(s.output_dir) / "teacher_store.jsonl").string();
}

void register_options(CLI::App& app, Settings& s) {
  auto& r = s.run;
  app.add_option("config", "experiment config file (INI sections)")->required();
  app.add_option("--run.name", s.name);
  app.add_option("--run.output_dir", s.output_dir);
  app.add_option("--run.algo,--algo", s.algo);
  app.add_option("--run.seed,--seed", r.seed);

  app.add_option("--env.kind", s.env_kind);
  app.add_option("--env.horizon_cap", r.env.horizon_cap);
  app.add_option("--env.num_actions", r.env.num_actions);
  app.add_option("--env.chain_length", r.env.chain_length);
  app.add_option("--env.off_support_depth", r.env.off_support_depth);
  app.add_option("--env.seed", r.env.seed);
  app.add_option("--env.task_count", r.env.task_count);

  app.add_option("--teacher.on_support_temperature", r.teacher.on_support_temperature);
  app.add_option("--teacher.off_support_floor", r.teacher.off_support_floor);
  app.add_option("--teacher.sharpening", r.teacher.sharpening);
  app.add_option("--teacher.off_support_temperature", r.teacher.off_support_temperature);
  app.add_option("--teacher.pass_m,--pass_m", r.pass_m);
  app.add_option("--teacher.store_path,--store", s.store_path);

  app.add_option("--policy.lr,--lr", r.lr);
  app.add_option("--policy.window,--window", r.window);
  app.add_option("--policy.train_temperature,--temperature", r.train_temperature);
  app.add_option("--policy.eval_temperature,--eval_temperature", r.eval_temperature);

  app.add_option("--curriculum.k_start,--k_start", r.schedule.k_start);
  app.add_option("--curriculum.eta,--eta", r.schedule.eta);
  app.add_option("--curriculum.cap", r.schedule.cap);
  app.add_option("--curriculum.total_steps,--max_steps", r.schedule.total_steps);

  app.add_option("--replay.capacity", r.buffer_capacity);
  app.add_option("--replay.delta_max,--delta_max", r.delta_max);
  app.add_option("--replay.batch_size,--batch_size", r.batch_size);

  app.add_option("--runtime.mode,--mode", s.mode);
  app.add_option("--runtime.actor_count", r.actor_count);
  app.add_option("--runtime.eval_every,--eval_interval", r.eval_every);
  app.add_option("--runtime.eval_episodes,--eval_episodes", r.eval_episodes);

  app.add_option("--eval.checkpoint,--checkpoint", s.checkpoint);

  app.add_option("--sweep.spec,--sweep", s.sweep, "KEY=V1,V2,... e.g. eta=2,4,6");
  app.add_option("--sweep.parallel,--parallel", s.parallel);
}

/// Config file items become --section.key=value arguments placed before the command line ones.
std::vector<std::string> config_args(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::vector<std::string> out;
  for (const auto& item : CLI::ConfigINI().from_config(f)) {
    if (item.name == "++" || item.name == "--") continue;
    std::string key;
    for (const auto& p : item.parents) key += p + ".";
    key += item.name;
    std::string val;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) val += (i ? "," : "") + item.inputs[i];
    out.push_back("--" + key + "=" + val);
  }
  return out;
}

Settings load_settings(const std::string& sub, int argc, char** argv) {
  std::vector<std::string> cli(argv + 2, argv + argc);
  if (cli.empty() || cli[0].rfind("--", 0) == 0) throw ConfigError(sub + ": config file path is required");
  std::vector<std::string> args{cli[0]};
  for (auto& a : config_args(cli[0])) args.push_back(a);
  args.insert(args.end(), cli.begin() + 1, cli.end());

  Settings s;
  CLI::App app("tcod " + sub);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  register_options(app, s);
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ExtrasError& e) {
    throw ConfigError(std::string("unknown config key: ") + e.what());
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }
  finalize(s);
  return s;
}

std::string config_ini(const Settings& s) {
  auto j = config_json(s.run);
  j["run"]["name"] = s.name;
  j["run"]["output_dir"] = s.output_dir;
  j["teacher"]["store_path"] = s.store_path;
  std::ostringstream os;
  for (const auto& [section, body] : j.items()) {
    os << "[" << section << "]\n";
    for (const auto& [k, v] : body.items()) os << k << " = " << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
    os << "\n";
  }
  return os.str();
}

std::string eval_summary(const EvalRecord& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "step %d  SR %.4f  rounds %.3f  traj_kl %.4f  episodes %d", e.step, e.success_rate,
                e.avg_rounds, e.traj_kl_mean, e.episodes);
  return buf;
}

int cmd_collect(Settings& s) {
  s.run.validate();
  auto store = collect_for(s.run);
  Env env(s.run.env);
  std::cout << "coverage " << store.by_task.size() << "/" << s.run.env.task_count << "  mean L "
            << store.mean_length() << "\n";
  if (!store.missing.empty()) {
    std::cout << "unsolved tasks:";
    for (int t : store.missing) std::cout << ' ' << t;
    std::cout << "\n";
  }
  if (store.empty()) {
    std::cerr << "error: teacher solved no task within pass_m=" << s.run.pass_m << "\n";
    return 1;
  }
  const fs::path out(s.store_path);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_store(store, env, out.string());
  save_teacher_checkpoint(s.run.teacher, (out.parent_path() / "teacher.ckpt").string());
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

int train_one(Settings s, std::ostream& log) {
  s.run.validate();
  std::optional<TeacherTrajectoryStore> store;
  if (s.run.algo == Algo::B2F || s.run.algo == Algo::SFT) {
    if (!fs::exists(s.store_path))
      throw ConfigError("teacher store not found: " + s.store_path + " (run 'tcod collect' first)");
    store = load_store(s.store_path, Env(s.run.env));
  }
  const fs::path dir = fs::path(s.output_dir) / s.name;
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "config.ini");
    f << config_ini(s);
  }
  auto res = run_training(s.run, store ? &*store : nullptr);
  for (const auto& w : res.warnings) log << "warning: " << w << "\n";
  write_records(res.log, (dir / "metrics.jsonl").string());
  write_csv(res.log, (dir / "eval.csv").string());
  save_checkpoint(res.params, (dir / "checkpoint.txt").string());
  auto evals = res.log.evals(Split::Eval);
  log << s.name << ": " << (evals.empty() ? std::string("no evaluation") : eval_summary(evals.back())) << "\n";
  return 0;
}

struct SweepSpec {
  std::string key;
  std::vector<std::string> values;
};

SweepSpec parse_sweep(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("sweep: expected KEY=V1,V2,..., got '" + spec + "'");
  SweepSpec sw;
  sw.key = spec.substr(0, eq);
  if (sw.key.find('.') == std::string::npos) sw.key = sw.key == "eta" ? "curriculum.eta" : sw.key;
  std::stringstream ss(spec.substr(eq + 1));
  std::string v;
  while (std::getline(ss, v, ','))
    if (!v.empty()) sw.values.push_back(v);
  if (sw.values.empty()) throw ConfigError("sweep: no values given");
  return sw;
}

int cmd_sweep(const std::string& sub, int argc, char** argv, const Settings& base) {
  if (base.sweep.empty()) throw ConfigError("sweep: --sweep KEY=V1,V2,... is required");
  const auto sw = parse_sweep(base.sweep);
  std::vector<Settings> runs;
  for (const auto& v : sw.values) {
    std::vector<char*> args(argv, argv + argc);
    std::string extra = "--" + sw.key + "=" + v;
    args.push_back(extra.data());
    Settings s = load_settings(sub, static_cast<int>(args.size()), args.data());
    auto leaf = sw.key.substr(sw.key.rfind('.') + 1);
    s.name = base.name + "_" + leaf + v;
    runs.push_back(std::move(s));
  }
  if (!base.parallel) {
    for (auto& s : runs) train_one(s, std::cout);
    return 0;
  }
  std::vector<std::ostringstream> logs(runs.size());
  std::vector<std::exception_ptr> errs(runs.size());
  std::vector<std::thread> ts;
  for (std::size_t i = 0; i < runs.size(); ++i)
    ts.emplace_back([&, i] {
      try {
        train_one(runs[i], logs[i]);
      } catch (...) {
        errs[i] = std::current_exception();
      }
    });
  for (auto& t : ts) t.join();
  for (auto& l : logs) std::cout << l.str();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
  return 0;
}

int cmd_eval(Settings& s) {
  s.run.validate();
  if (s.checkpoint.empty()) throw ConfigError("eval: --checkpoint PATH is required");
  auto env = std::make_shared<const Env>(s.run.env);
  TeacherPolicy teacher(env, s.run.teacher);
  Rng rng(s.run.seed, 0xe7a1);
  EvalRecord rec;
  if (s.checkpoint == "uniform") {
    PolicyParams p(s.run.env.num_actions);
    rec = evaluate(p, *env, teacher, s.run.eval_episodes, rng, s.run.window, s.run.eval_temperature);
  } else if (is_teacher_checkpoint(s.checkpoint)) {
    TeacherPolicy t(env, load_teacher_checkpoint(s.checkpoint));
    rec = evaluate(t, *env, teacher, s.run.eval_episodes, rng, s.run.window, s.run.eval_temperature);
  } else {
    auto p = load_checkpoint(s.checkpoint);
    if (p.num_actions != s.run.env.num_actions)
      throw ConfigError("checkpoint " + s.checkpoint + " has " + std::to_string(p.num_actions) +
                        " actions, env has " + std::to_string(s.run.env.num_actions));
    rec = evaluate(p, *env, teacher, s.run.eval_episodes, rng, s.run.window, s.run.eval_temperature,
                   static_cast<int>(p.version));
  }
  rec.active_k = s.run.env.horizon_cap;
  const fs::path dir = fs::path(s.output_dir) / s.name;
  fs::create_directories(dir);
  MetricsLog log;
  log.config_hash = config_hash(s.run);
  log.records.push_back(rec);
  write_records(log, (dir / "eval.jsonl").string());
  std::cout << eval_summary(rec) << "\n";
  return 0;
}

void usage() {
  std::cerr << "usage: tcod <collect|train|eval|sweep> <config.ini> [--section.key=value ...]\n";
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    usage();
    return 2;
  }
  const std::string sub = argv[1];
  if (sub == "-h" || sub == "--help") {
    usage();
    return 0;
  }
  try {
    if (sub != "collect" && sub != "train" && sub != "eval" && sub != "sweep") {
      usage();
      return 2;
    }
    Settings s = load_settings(sub, argc, argv);
    if (sub == "collect") return cmd_collect(s);
    if (sub == "eval") return cmd_eval(s);
    if (sub == "sweep" || !s.sweep.empty()) return cmd_sweep(sub, argc, argv, s);
    return train_one(s, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
