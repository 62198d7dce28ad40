#include "commands.hpp"

#include "clarity/llm_http.hpp"
#include "clarity/log.hpp"
#include "clarity/metrics.hpp"

#include <ctime>
#include <filesystem>
#include <iostream>
#include <memory>

namespace clarity::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

config::RunConfig load_config(const Globals& g) {
    config::RunConfig c = config::load(g.config_path, g.overrides);
    if (g.offline) c.distill.offline = true;
    if (g.max_steps) {
        c.train.max_steps = *g.max_steps;
        c.train.validate();
    }
    return c;
}

fs::path run_dir(const Globals& g, bool allow_default) {
    if (!g.run_dir.empty()) return g.run_dir;
    if (!allow_default) throw ConfigError("--out <run directory> is required for this command");
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    localtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
    return fs::path("runs") / buf;
}

void prepare_output_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) throw OutputExists(dir.string() + " already exists; pass --force to overwrite");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

void write_snapshot(const fs::path& dir, const config::RunConfig& c, const json& command) {
    json j{{"command", command}, {"config", config::to_json(c)}};
    write_file_atomic((dir / "config.resolved.json").string(), j.dump(2) + "\n");
}

std::string cache_path(const config::RunConfig& c, const fs::path& run) {
    return c.distill.cache.empty() ? (run / "distill" / "cache.jsonl").string() : c.distill.cache;
}

std::unique_ptr<distill::LlmClient> make_upstream(const config::RunConfig& c) {
    if (c.distill.offline) return nullptr;
    if (c.distill.client == "mock") return std::make_unique<distill::MockLlmClient>(distill::template_mock_response);
    return std::make_unique<distill::HttpLlmClient>(c.distill.endpoint, c.distill.api_key_env);
}

struct Stage1 {
    corpus::Corpus train;
    train::TaskData data;
    model::Tokenizer tokenizer;
    std::vector<distill::RationaleRecord> records;
};

Stage1 load_stage1(const config::RunConfig& c, const fs::path& run) {
    Stage1 s;
    s.train = config::load_dataset(c.train_data, corpus::Split::train).corpus;
    const fs::path records = run / "distill" / "rationales.jsonl";
    if (!fs::exists(records)) {
        throw DataError("distilled rationales not found at " + records.string() + "; run `clarity distill` first");
    }
    s.records = distill::load_rationales(records.string());

    std::vector<std::string> texts;
    for (const auto& a : s.train.actions()) texts.push_back(a.text);
    for (const auto& n : s.train.norms()) texts.push_back(n.norm_text);
    for (auto p : model::k_all_prefixes) texts.emplace_back(model::prefix_text(p));
    for (const auto& r : s.records) {
        const auto* action = s.train.find_action(r.action_id);
        if (!action) {
            log::warn("rationale for unknown action " + r.action_id + " ignored");
            continue;
        }
        const std::string& norm = s.train.norm_text_of(r.action_id);
        texts.push_back(r.rationale_text);
        s.data.rationale.push_back(train::make_rationale_example(action->text, r.stance, r.rationale_text));
        s.data.norm.push_back({r.rationale_text, norm});
        s.data.scorer.push_back({action->text, action->stance, norm, r.rationale_text});
    }
    if (s.data.rationale.empty()) throw DataError("no usable distilled rationales in " + records.string());
    const std::vector<std::string> forced{std::string(model::k_support_label), std::string(model::k_oppose_label)};
    s.tokenizer = model::Tokenizer::build(texts, c.model.max_vocab, forced);
    return s;
}

fs::path best_checkpoint(const fs::path& stage_dir) {
    const fs::path pointer = stage_dir / "best";
    if (!fs::exists(pointer)) throw ModelError("missing checkpoint pointer " + pointer.string());
    const fs::path ckpt = stage_dir / trim(read_file(pointer.string())) / "model.ckpt";
    if (!fs::exists(ckpt)) throw ModelError("missing checkpoint " + ckpt.string());
    return ckpt;
}

model::DeskTransformer load_model(const fs::path& path, model::TransformerConfig expected) {
    auto m = model::DeskTransformer::load(path.string());
    expected.seed = m.config().seed;
    if (!(m.config() == expected)) {
        throw ModelError("checkpoint " + path.string() + " was trained with a different model configuration");
    }
    return m;
}

/// Fine-tuned generator when present, otherwise the Stage-1 one.
fs::path generator_checkpoint(const config::RunConfig& c, const fs::path& run, train::Task task) {
    const std::string& explicit_path = task == train::Task::rationale ? c.checkpoints.rationale : c.checkpoints.norm;
    if (!explicit_path.empty()) return explicit_path;
    const fs::path tuned = run / "finetune" / std::string(train::to_string(task));
    if (fs::exists(tuned / "best")) return best_checkpoint(tuned);
    return best_checkpoint(run / "pretrain" / std::string(train::to_string(task)));
}

fs::path stage1_checkpoint(const config::RunConfig& c, const fs::path& run, train::Task task) {
    const std::string& explicit_path = task == train::Task::rationale ? c.checkpoints.rationale
                                       : task == train::Task::norm    ? c.checkpoints.norm
                                                                      : c.checkpoints.scorer;
    if (!explicit_path.empty()) return explicit_path;
    const fs::path dir = run / "pretrain" / std::string(train::to_string(task));
    if (!fs::exists(dir / "best")) {
        throw ModelError("missing Stage-1 checkpoint in " + dir.string() + "; run `clarity pretrain --task " +
                         std::string(train::to_string(task)) + "` first");
    }
    return best_checkpoint(dir);
}

std::vector<fs::path> assessment_files(const fs::path& run, const std::vector<std::string>& given) {
    std::vector<fs::path> files(given.begin(), given.end());
    if (files.empty()) {
        for (const char* sub : {"assess", "assess_claritycot"}) {
            if (fs::exists(run / sub / "assessments.jsonl")) files.push_back(run / sub / "assessments.jsonl");
        }
    }
    if (files.empty()) throw DataError("no assessment files found; run `clarity assess` first");
    return files;
}

pipeline::ParsedAssessments read_assessments(const std::vector<fs::path>& files) {
    pipeline::ParsedAssessments all;
    for (const auto& f : files) {
        auto parsed = pipeline::parse_assessments(read_file(f.string()));
        for (auto& a : parsed.assessments) all.assessments.push_back(std::move(a));
        for (auto& m : parsed.malformed) {
            m.message = f.filename().string() + ": " + m.message;
            all.malformed.push_back(std::move(m));
        }
    }
    return all;
}

}  // namespace

int run_corpus(const CorpusArgs& args) {
    config::DatasetSpec spec{args.input, args.format};
    if (spec.format != "canonical" && spec.format != "moral_stories" && spec.format.rfind("ethics_", 0) != 0) {
        throw ConfigError("unknown dataset format '" + spec.format + "'");
    }
    auto result = config::load_dataset(spec, corpus::parse_split(args.split));
    const auto& c = result.corpus;
    std::cout << "norm groups: " << c.norms().size() << "\n"
              << "support actions: " << c.count(Stance::support) << "\n"
              << "oppose actions: " << c.count(Stance::oppose) << "\n"
              << "record errors: " << result.errors.size() << "\n";
    if (!args.output.empty()) {
        corpus::save_canonical(c, args.output);
        std::cout << "wrote " << args.output << "\n";
    }
    return 0;
}

int run_distill(const Globals& g) {
    const auto c = load_config(g);
    const fs::path run = run_dir(g, true);
    const fs::path out = run / "distill";
    const fs::path records_path = out / "rationales.jsonl";
    if (fs::exists(records_path) && !g.force) {
        throw OutputExists(records_path.string() + " already exists; pass --force to overwrite");
    }
    fs::create_directories(out);
    const auto train = config::load_dataset(c.train_data, corpus::Split::train).corpus;

    distill::PromptCache cache(cache_path(c, run));
    auto upstream = make_upstream(c);
    distill::DistillOptions options;
    options.parallelism = c.distill.parallelism;
    options.retry = c.distill.retry;
    options.decoding = c.distill.decoding;
    const auto result = distill::distill(train, upstream.get(), cache, options);

    if (!result.missing_hashes.empty()) {
        std::cerr << "offline mode: " << result.missing_hashes.size() << " prompts are not cached:\n";
        for (const auto& h : result.missing_hashes) std::cerr << "  " << h << "\n";
        throw DataError("offline distillation with a cold cache");
    }
    distill::save_rationales(result.records, records_path.string());

    std::string summary = "norm groups: " + std::to_string(train.norms().size()) + "\n" +
                          "records: " + std::to_string(result.records.size()) + "\n" +
                          "skipped groups: " + std::to_string(result.skipped.size()) + "\n";
    for (const auto& s : result.skipped) summary += "  " + s.norm_id + ": " + s.reason + "\n";
    write_file_atomic((out / "summary.txt").string(), summary);
    write_snapshot(out, c, {{"name", "distill"}});
    std::cout << summary << "live calls: " << result.live_calls << "\ncache hits: " << result.cache_hits << "\n"
              << "run directory: " << run.string() << "\n";
    return 0;
}

int run_sample_rationales(const Globals& g, std::size_t sample, std::uint64_t seed) {
    const auto c = load_config(g);
    const fs::path run = run_dir(g, false);
    const auto train = config::load_dataset(c.train_data, corpus::Split::train).corpus;
    const fs::path records = run / "distill" / "rationales.jsonl";
    if (!fs::exists(records)) throw DataError("no distilled rationales at " + records.string());
    const fs::path out = run / "review";
    prepare_output_dir(out, g.force);
    const auto sheet = distill::export_review_sample(distill::load_rationales(records.string()), train, sample, seed);
    write_file_atomic((out / "sample.tsv").string(), sheet);
    write_snapshot(out, c, {{"name", "sample-rationales"}, {"sample", sample}, {"seed", seed}});
    std::cout << "wrote " << (out / "sample.tsv").string() << "\n";
    return 0;
}

int run_pretrain(const Globals& g, const std::string& task_name) {
    const auto task = train::parse_task(task_name);
    const auto c = load_config(g);
    const fs::path run = run_dir(g, false);
    auto stage1 = load_stage1(c, run);
    const fs::path out = run / "pretrain" / task_name;
    prepare_output_dir(out, g.force);

    model::DeskTransformer model(c.transformer(task), stage1.tokenizer);
    train::PretrainOptions options;
    options.checkpoint_dir = out.string();
    const auto result = train::pretrain(task, model, stage1.data, c.train, options);
    write_snapshot(out, c, {{"name", "pretrain"}, {"task", task_name}});
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", result.final_loss);
    std::cout << "task: " << task_name << "\nsteps: " << result.losses.size() << "\nfinal loss: " << buf
              << "\nbest step: " << result.best_step << "\n";
    return 0;
}

int run_finetune(const Globals& g) {
    const auto c = load_config(g);
    const fs::path run = run_dir(g, false);
    auto stage1 = load_stage1(c, run);
    auto rationale_gen = load_model(stage1_checkpoint(c, run, train::Task::rationale), c.transformer(train::Task::rationale));
    auto norm_gen = load_model(stage1_checkpoint(c, run, train::Task::norm), c.transformer(train::Task::norm));
    const fs::path out = run / "finetune";
    prepare_output_dir(out, g.force);

    train::FinetuneData data;
    data.corpus = &stage1.train;
    data.rationale_supervision = stage1.data.rationale;
    data.norm_supervision = stage1.data.norm;
    data.triplets = corpus::build_triplets(stage1.train, static_cast<std::size_t>(c.train.triplet_count), c.seed,
                                           {c.train.stance_matched_negatives});
    train::FinetuneOptions options;
    options.checkpoint_dir = out.string();
    const auto result = train::finetune_contrastive(rationale_gen, norm_gen, data, c.train, options);
    write_snapshot(out, c, {{"name", "finetune"}});
    std::cout << "steps: " << result.reports.size() << "\nbest step: " << result.best_step << "\n";
    if (!result.reports.empty()) {
        const auto& r = result.reports.back();
        char buf[160];
        std::snprintf(buf, sizeof buf, "last: l_r=%.6f l_n=%.6f l_trip=%.6f total=%.6f", r.l_r, r.l_n, r.l_trip, r.total);
        std::cout << buf << "\n";
    }
    return 0;
}

int run_assess(const Globals& g, const AssessArgs& args) {
    auto c = load_config(g);
    if (!args.mode.empty()) c.pipeline.mode = pipeline::parse_mode(args.mode);
    const fs::path run = run_dir(g, false);

    std::vector<std::string> actions, ids;
    if (!args.action.empty()) {
        actions.push_back(args.action);
    } else if (!args.input.empty()) {
        for (auto& line : split_lines(read_file(args.input))) {
            if (!trim(line).empty()) actions.push_back(trim(line));
        }
    } else {
        const auto test = config::load_dataset(c.test_data, corpus::Split::test).corpus;
        for (const auto& a : test.actions()) {
            actions.push_back(a.text);
            ids.push_back(a.id);
        }
    }

    std::vector<pipeline::BatchItem> items;
    if (args.claritycot) {
        distill::PromptCache cache(cache_path(c, run));
        auto upstream = make_upstream(c);
        distill::CachingClient client(cache, upstream.get(), std::string(distill::k_claritycot_template_id),
                                      c.distill.retry);
        for (std::size_t i = 0; i < actions.size(); ++i) {
            pipeline::BatchItem item;
            try {
                item.assessment = pipeline::claritycot_assess(actions[i], client, c.distill.decoding);
                if (!ids.empty()) item.assessment->id = ids[i];
            } catch (const pipeline::ClarityCotError& e) {
                item.error = std::string(e.what()) + " | raw response: " + e.raw_response;
            } catch (const distill::CacheMiss& e) {
                item.error = e.what();
            }
            items.push_back(std::move(item));
        }
    } else {
        const auto rationale_gen = load_model(generator_checkpoint(c, run, train::Task::rationale),
                                              c.transformer(train::Task::rationale));
        const auto norm_gen = load_model(generator_checkpoint(c, run, train::Task::norm), c.transformer(train::Task::norm));
        const auto scorer = load_model(stage1_checkpoint(c, run, train::Task::scorer), c.transformer(train::Task::scorer));
        pipeline::Models models{&rationale_gen, &norm_gen, &scorer};
        pipeline::AssessOptions options;
        options.mode = c.pipeline.mode;
        options.decoding.max_tokens = c.pipeline.max_tokens;
        options.tie_break = c.pipeline.tie_break;
        if (!args.action.empty()) {
            std::cout << json(pipeline::assess(args.action, models, options)).dump() << "\n";
            return 0;
        }
        items = pipeline::assess_batch(actions, models, options, ids);
    }

    if (!args.action.empty()) {
        if (!items.front().assessment) throw ModelError(items.front().error);
        std::cout << json(*items.front().assessment).dump() << "\n";
        return 0;
    }

    const fs::path out = run / (args.claritycot ? "assess_claritycot" : "assess");
    prepare_output_dir(out, g.force);
    std::vector<pipeline::Assessment> ok;
    std::string errors;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].assessment) {
            ok.push_back(*items[i].assessment);
        } else {
            errors += json{{"index", i}, {"action", actions[i]}, {"error", items[i].error}}.dump() + "\n";
        }
    }
    write_file_atomic((out / "assessments.jsonl").string(), pipeline::to_jsonl(ok));
    if (!errors.empty()) write_file_atomic((out / "errors.jsonl").string(), errors);
    write_snapshot(out, c, {{"name", "assess"}, {"claritycot", args.claritycot}, {"input", args.input}});
    std::cout << "assessed: " << ok.size() << "\nerrors: " << (items.size() - ok.size()) << "\n";
    return 0;
}

int run_evaluate(const Globals& g, const EvaluateArgs& args) {
    const auto c = load_config(g);
    const fs::path run = run_dir(g, false);
    auto parsed = read_assessments(assessment_files(run, args.assessments));
    const auto gold = config::load_dataset(c.test_data, corpus::Split::test).corpus;

    std::unique_ptr<metrics::Embedder> embedder;
    std::optional<model::DeskTransformer> norm_gen;
    if (c.evaluate.embedder == "desk-encoder") {
        norm_gen.emplace(load_model(generator_checkpoint(c, run, train::Task::norm), c.transformer(train::Task::norm)));
        embedder = std::make_unique<metrics::ModelEncoderEmbedder>(*norm_gen, "norm-generator");
    } else {
        embedder = std::make_unique<metrics::HashedBowEmbedder>();
    }
    const auto report = metrics::build_report(parsed.assessments, gold, *embedder, c.evaluate.dataset_name,
                                              std::move(parsed.malformed));
    const fs::path out = run / "evaluate";
    prepare_output_dir(out, g.force);
    const std::string text = metrics::render_text(report);
    write_file_atomic((out / "report.txt").string(), text);
    write_file_atomic((out / "report.jsonl").string(), metrics::render_jsonl(report));
    write_snapshot(out, c, {{"name", "evaluate"}});
    std::cout << text;
    return 0;
}

int run_export_human_eval(const Globals& g, const HumanEvalArgs& args) {
    const auto c = load_config(g);
    const fs::path run = run_dir(g, false);
    const auto parsed = read_assessments(assessment_files(run, args.assessments));
    const auto sheet = metrics::export_human_eval(parsed.assessments, args.sample, args.seed);
    const fs::path out = run / "human_eval";
    prepare_output_dir(out, g.force);
    write_file_atomic((out / "sheet.tsv").string(), sheet.sheet);
    write_file_atomic((out / "key.tsv").string(), sheet.key);
    write_snapshot(out, c, {{"name", "export-human-eval"}, {"sample", args.sample}, {"seed", args.seed}});
    std::cout << "wrote " << (out / "sheet.tsv").string() << " and " << (out / "key.tsv").string() << "\n";
    return 0;
}

int run_sweep(const Globals& g, const SweepArgs& args) {
    const auto c = load_config(g);
    const fs::path run = run_dir(g, false);
    auto stage1 = load_stage1(c, run);
    const auto base_r = load_model(stage1_checkpoint(c, run, train::Task::rationale), c.transformer(train::Task::rationale));
    const auto base_n = load_model(stage1_checkpoint(c, run, train::Task::norm), c.transformer(train::Task::norm));
    const auto test = config::load_dataset(c.test_data, corpus::Split::test).corpus;
    const auto held_out = corpus::build_triplets(test, static_cast<std::size_t>(args.triplets), c.seed);
    const fs::path out = run / "sweep";
    prepare_output_dir(out, g.force);

    auto points = train::alpha_sweep(c.train, args.alphas, args.seeds, [&](const train::TrainConfig& tc) {
        auto r = base_r;
        auto n = base_n;
        train::FinetuneData data;
        data.corpus = &stage1.train;
        data.rationale_supervision = stage1.data.rationale;
        data.norm_supervision = stage1.data.norm;
        data.triplets = corpus::build_triplets(stage1.train, static_cast<std::size_t>(tc.triplet_count), tc.seed,
                                               {tc.stance_matched_negatives});
        train::finetune_contrastive(r, n, data, tc);
        return train::contrastive_stats(r, n, test, held_out, tc.triplet_embedding, tc.generation_max_tokens)
            .satisfied_fraction;
    });
    std::string table = "alpha\tseed\theld_out_satisfied\n";
    for (const auto& p : points) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%.3f\t%llu\t%.6f\n", p.alpha, static_cast<unsigned long long>(p.seed), p.score);
        table += buf;
    }
    write_file_atomic((out / "results.tsv").string(), table);
    write_snapshot(out, c, {{"name", "sweep"}, {"alphas", args.alphas}, {"seeds", args.seeds}});
    std::cout << table;
    return 0;
}

}  // namespace clarity::cli
