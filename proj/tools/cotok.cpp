// cotok: synth | train | eval | profile | export-attention
//
// Exit status: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "cotok.hpp"

namespace fs = std::filesystem;
using namespace cotok;

namespace {

struct ConfigSource {
  std::string preset_name;
  std::string path;
  std::string scale = "full";
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* cmd, const std::string& default_preset) {
    preset_name = default_preset;
    auto* p = cmd->add_option("--preset", preset_name, "preset name")->check(CLI::IsMember(preset_names()));
    cmd->add_option("--config", path, "config file (key = value)")->check(CLI::ExistingFile)->excludes(p);
    cmd->add_option("--scale", scale, "preset scale")->check(CLI::IsMember({"full", "desk"}));
    cmd->add_option("--seed", seed, "override the config seed");
  }

  ModelConfig load() const {
    ModelConfig c = path.empty() ? preset(preset_name, scale == "desk" ? PresetScale::desk : PresetScale::full)
                                 : load_config(path);
    if (seed) c.seed = *seed;
    return validate(c);
  }
};

std::vector<PreparedExample> prepare_all(const std::vector<QAExample>& examples, const ModelConfig& config,
                                         const Vocab& vocab, const std::vector<std::string>& answers,
                                         const fs::path& base_dir) {
  std::vector<PreparedExample> out(examples.size());
  std::vector<std::string> errors(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    try {
      out[i] = prepare_example(examples[i], config, vocab, answers, base_dir);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) throw Error("example '" + examples[i].id + "': " + errors[i]);
  return out;
}

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << body;
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string task;
  long n = 0;
  std::uint64_t seed = 0;
  std::uint64_t first_index = 0;
  std::string out;
  bool write_videos = false;
};

void run_synth(const SynthArgs& a) {
  const SynthTask task = parse_task(a.task);
  fs::create_directories(a.out);
  std::vector<QAExample> examples;
  examples.reserve(static_cast<std::size_t>(a.n));
  if (a.write_videos) fs::create_directories(fs::path(a.out) / "videos");
  for (long i = 0; i < a.n; ++i) {
    auto s = synth_example(task, a.seed, a.first_index + static_cast<std::uint64_t>(i));
    if (a.write_videos) {
      const std::string rel = "videos/" + s.example.id + ".txt";
      write_raw_tensor_video((fs::path(a.out) / rel).string(), s.video);
      s.example.video = rel;
    }
    examples.push_back(std::move(s.example));
  }
  const auto qa = fs::path(a.out) / "qa.tsv";
  write_qa_file(qa.string(), examples);
  std::cout << "wrote " << examples.size() << " examples to " << qa.string() << "\n";
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  ConfigSource config;
  std::string data;
  std::string out;
  std::size_t steps = 0;
  std::string log;
  std::size_t vocab_limit = 0;
  bool completion = false;
};

void run_train(const TrainArgs& a) {
  ModelConfig cfg = a.config.load();
  auto raw = read_qa_file(a.data);
  if (a.completion)
    for (auto& ex : raw) ex = completion_example(ex);
  ModelBundle bundle;
  bundle.vocab = build_vocab(raw, a.vocab_limit ? a.vocab_limit : cfg.vocab_size);
  bundle.answers = build_answer_list(raw, cfg.answer_vocab_size);
  cfg.vocab_size = bundle.vocab.size();
  cfg.answer_vocab_size = std::max<std::size_t>(1, bundle.answers.size());
  bundle.config = validate(cfg);
  const auto data = prepare_all(raw, bundle.config, bundle.vocab, bundle.answers, fs::path(a.data).parent_path());
  const std::size_t steps = a.steps ? a.steps : bundle.config.train_steps;
  const std::size_t every = std::max<std::size_t>(1, steps / 10);
  auto state = train<float>(data, bundle.config,
                            TrainOptions{steps, a.log, [&](std::size_t step, double loss) {
                                           if (step % every == 0 || step == steps)
                                             std::cout << "step " << step << "  loss " << loss << "\n";
                                         }});
  bundle.params = std::move(state.params);
  bundle.save(a.out);
  std::cout << "saved model to " << a.out << "\n";
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string data;
  std::string out;
  std::string decode = "open";
  std::size_t beam = 0;
  std::string vocab;
  std::string metric = "exact";
  std::string report_csv;
  bool raw_match = false;
};

void run_eval(const EvalArgs& a) {
  const auto bundle = ModelBundle::load(a.model);
  const DecodeMode mode = parse_decode_mode(a.decode);
  const MetricMode metric = parse_metric_mode(a.metric);
  const std::size_t beam = a.beam ? a.beam : bundle.config.beam;
  std::vector<std::string> answer_set = bundle.answers;
  if (!a.vocab.empty()) {
    if (mode == DecodeMode::fc) throw Error("--vocab applies to open/masked decoding; fc uses the trained answer list");
    answer_set = ModelBundle::read_lines(a.vocab);
    if (answer_set.empty()) throw Error("answer vocabulary '" + a.vocab + "' is empty");
  }
  const auto raw = read_qa_file(a.data);
  const auto data = prepare_all(raw, bundle.config, bundle.vocab, bundle.answers, fs::path(a.data).parent_path());
  std::vector<Prediction> preds(data.size());
  std::vector<std::string> errors(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    try {
      const auto r = answer<float>(data[i], bundle.config, bundle.params, bundle.vocab, mode, beam, answer_set);
      preds[i] = Prediction{data[i].id, r.text, r.score};
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty()) throw Error("example '" + data[i].id + "': " + errors[i]);
  write_predictions(a.out, preds);
  const auto report = evaluate(preds, raw, metric, a.raw_match ? MatchRule::raw : MatchRule::normalized);
  std::cout << format_eval(report);
  if (!a.report_csv.empty()) write_text(a.report_csv, eval_csv(report));
}

// --- profile ---------------------------------------------------------------

struct ProfileArgs {
  ConfigSource config;
  std::string csv;
  std::vector<std::string> compare;
};

void run_profile(const ProfileArgs& a) {
  if (!a.compare.empty()) {
    const PresetScale scale = a.config.scale == "desk" ? PresetScale::desk : PresetScale::full;
    std::vector<std::pair<std::string, ModelConfig>> configs;
    for (const auto& name : a.compare) configs.emplace_back(name, preset(name, scale));
    const auto rows = compare(configs);
    std::cout << format_comparison(rows);
    if (!a.csv.empty()) {
      std::ostringstream out;
      out << "config,flops,params,ratio\n";
      for (const auto& r : rows) out << r.name << ',' << r.report.total << ',' << r.report.params << ',' << r.ratio << "\n";
      write_text(a.csv, out.str());
    }
    return;
  }
  const auto report = estimate(a.config.load());
  std::cout << format_report(report);
  if (!a.csv.empty()) write_text(a.csv, report_csv(report));
}

// --- export-attention --------------------------------------------------------

struct ExportArgs {
  std::string model;
  std::string data;
  std::vector<std::string> ids;
  std::string out;
  bool no_images = false;
};

void run_export(const ExportArgs& a) {
  const auto bundle = ModelBundle::load(a.model);
  if (bundle.config.fusion_mode == FusionMode::dense_concat)
    throw Error("model uses dense_concat fusion, which has no attention maps");
  auto raw = read_qa_file(a.data);
  if (!a.ids.empty()) {
    const std::set<std::string> wanted(a.ids.begin(), a.ids.end());
    std::erase_if(raw, [&](const QAExample& ex) { return !wanted.count(ex.id); });
    if (raw.size() != wanted.size()) throw Error("some requested ids are not in '" + a.data + "'");
  }
  const auto data = prepare_all(raw, bundle.config, bundle.vocab, bundle.answers, fs::path(a.data).parent_path());
  std::size_t files = 0;
  for (const auto& ex : data) {
    Tape<float> tape;
    tape.set_grad_enabled(false);
    ParamBinder<float> params(tape, bundle.params);
    const auto enc = encode(ex.clips, ex.question, bundle.config, params);
    files += export_attention(fs::path(a.out) / ex.id, enc.fusion.attention, !a.no_images).size();
  }
  std::cout << "wrote " << files << " files for " << data.size() << " examples under " << a.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative co-tokenization for video question answering"};
  app.require_subcommand(1, 1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic QA dataset");
  s->add_option("--task", synth.task, "frame_color, temporal_order or repeat_count")->required();
  s->add_option("--n", synth.n, "number of examples")->required()->check(CLI::PositiveNumber);
  s->add_option("--seed", synth.seed, "generator seed");
  s->add_option("--first-index", synth.first_index, "index of the first example");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_flag("--write-videos", synth.write_videos, "write raw tensor videos instead of synth: references");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model and save it");
  tr.config.attach(t, "toy");
  t->add_option("--data", tr.data, "QA file")->required()->check(CLI::ExistingFile);
  t->add_option("--out", tr.out, "model directory")->required();
  t->add_option("--steps", tr.steps, "optimisation steps (default: config train_steps)");
  t->add_option("--log", tr.log, "CSV training log");
  t->add_option("--vocab-size", tr.vocab_limit, "cap on the word vocabulary");
  t->add_flag("--completion", tr.completion, "treat questions as captions and train caption completion");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "answer a QA file and score the predictions");
  e->add_option("--model", ev.model, "model directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--data", ev.data, "QA file")->required()->check(CLI::ExistingFile);
  e->add_option("--out", ev.out, "predictions file")->required();
  e->add_option("--decode", ev.decode, "open, masked or fc")->check(CLI::IsMember({"open", "masked", "fc"}));
  e->add_option("--beam", ev.beam, "beam width (default: config beam)");
  e->add_option("--vocab", ev.vocab, "answer list, one per line, for masked decoding")->check(CLI::ExistingFile);
  e->add_option("--metric", ev.metric, "exact or ivqa")->check(CLI::IsMember({"exact", "ivqa"}));
  e->add_option("--report", ev.report_csv, "write the evaluation report as CSV");
  e->add_flag("--raw-match", ev.raw_match, "compare answers without normalisation");

  ProfileArgs pr;
  auto* p = app.add_subcommand("profile", "analytic FLOP and parameter counts");
  pr.config.attach(p, "plus_cotok");
  p->add_option("--csv", pr.csv, "write the report as CSV");
  p->add_option("--compare", pr.compare, "compare presets (ratios relative to the first)")
      ->check(CLI::IsMember(preset_names()));

  ExportArgs ex;
  auto* x = app.add_subcommand("export-attention", "write attention maps as text and PGM images");
  x->add_option("--model", ex.model, "model directory")->required()->check(CLI::ExistingDirectory);
  x->add_option("--data", ex.data, "QA file")->required()->check(CLI::ExistingFile);
  x->add_option("--ids", ex.ids, "example ids (default: all)")->delimiter(',');
  x->add_option("--out", ex.out, "output directory")->required();
  x->add_flag("--no-images", ex.no_images, "text files only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }

  try {
    if (s->parsed()) run_synth(synth);
    else if (t->parsed()) run_train(tr);
    else if (e->parsed()) run_eval(ev);
    else if (p->parsed()) run_profile(pr);
    else if (x->parsed()) run_export(ex);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}
