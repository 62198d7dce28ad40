#include "clarity/distiller.hpp"
#include "clarity/metrics.hpp"
#include "clarity/pipeline.hpp"
#include "support.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sys/wait.h>

using namespace clarity;
using autograd::Matrix;
using autograd::Tensor;
using model::TaskPrefix;
namespace fs = std::filesystem;

namespace {

constexpr double k_triplet_tol = 1e-6;
constexpr double k_triplet_grad_tol = 1e-3;
constexpr double k_triplet_seconds = 10.0;
constexpr double k_identity_tol = 1e-6;
constexpr double k_uniform_tol = 1e-4;
constexpr double k_scorer_accuracy = 0.95;
constexpr int k_scorer_steps = 500;
constexpr int k_generator_steps = 300;
constexpr double k_overfit_seconds = 300.0;
constexpr double k_contrastive_after = 0.80;
constexpr double k_contrastive_before = 0.60;
constexpr double k_bleu_tol = 1e-4;
constexpr double k_exact_tol = 1e-12;
constexpr double k_chain_seconds = 900.0;

struct Verdict {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::vector<std::string> texts_of(const testing::SeparableCorpus& s) {
    std::vector<std::string> t;
    for (const auto& a : s.corpus.actions()) t.push_back(a.text);
    for (const auto& r : s.rationale) t.push_back(r.rationale);
    for (const auto& n : s.norm) t.push_back(n.norm);
    return t;
}

std::vector<train::ScorerExample> scorer_items(const testing::SeparableCorpus& s) {
    std::vector<train::ScorerExample> out;
    for (std::size_t i = 0; i < s.rationale.size(); ++i) {
        out.push_back({s.rationale[i].action, s.rationale[i].stance, s.norm[i].norm, s.rationale[i].rationale});
    }
    return out;
}

double direct_triplet(const std::vector<double>& a, const std::vector<double>& p, const std::vector<double>& n,
                      double alpha) {
    double ap = 0, an = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ap += (a[i] - p[i]) * (a[i] - p[i]);
        an += (a[i] - n[i]) * (a[i] - n[i]);
    }
    return std::max(std::sqrt(ap) - std::sqrt(an) + alpha, 0.0);
}

Verdict triplet_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(1001);
    std::normal_distribution<double> g(0, 1);
    std::uniform_real_distribution<double> alpha_dist(0.1, 0.5);
    double worst = 0, worst_grad = 0;
    std::size_t grads = 0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t d = i % 2 == 0 ? 4 : 64;
        std::vector<double> a(d), p(d), n(d);
        for (std::size_t k = 0; k < d; ++k) {
            a[k] = g(rng);
            p[k] = g(rng);
            n[k] = g(rng);
        }
        const double alpha = alpha_dist(rng);
        const double got = train::triplet_loss({a}, {p}, {n}, alpha);
        worst = std::max(worst, std::abs(got - direct_triplet(a, p, n, alpha)));

        if (i % 10 != 0) continue;
        const double gap = direct_triplet(a, p, n, alpha);
        if (gap < 1e-3) continue;
        const auto row = [](const std::vector<double>& v) {
            return Matrix(Eigen::Map<const Matrix>(v.data(), 1, static_cast<Eigen::Index>(v.size())));
        };
        auto ta = Tensor::parameter(row(a)), tp = Tensor::parameter(row(p)), tn = Tensor::parameter(row(n));
        train::triplet_loss(ta, tp, tn, alpha).backward();
        std::vector<double>* vecs[3] = {&a, &p, &n};
        Tensor* tensors[3] = {&ta, &tp, &tn};
        for (int which = 0; which < 3; ++which) {
            for (std::size_t k = 0; k < d; ++k) {
                const double h = 1e-6;
                const double saved = (*vecs[which])[k];
                (*vecs[which])[k] = saved + h;
                const double up = direct_triplet(a, p, n, alpha);
                (*vecs[which])[k] = saved - h;
                const double down = direct_triplet(a, p, n, alpha);
                (*vecs[which])[k] = saved;
                const double numeric = (up - down) / (2 * h);
                const double analytic = tensors[which]->grad()(0, static_cast<Eigen::Index>(k));
                worst_grad = std::max(worst_grad, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
                ++grads;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= k_triplet_tol && worst_grad <= k_triplet_grad_tol && grads > 0 && secs < k_triplet_seconds,
            "max |err| " + fmt("%.2e", worst) + ", max grad rel err " + fmt("%.2e", worst_grad) + " over " +
                std::to_string(grads) + " coords, " + fmt("%.2f", secs) + " s"};
}

Verdict loss_identity() {
    auto s = testing::separable_corpus(3, 0, corpus::Split::train);
    auto rg = testing::make_model(texts_of(s), 201);
    auto ng = testing::make_model(texts_of(s), 202);
    train::FinetuneData data{&s.corpus, s.rationale, s.norm, testing::cross_norm_triplets(s.corpus, 16, 203)};
    auto config = testing::fast_config(204, 20);
    config.epochs = 5;
    config.triplet_batch_size = 4;
    config.generation_max_tokens = 12;
    config.regenerate_every = 4;
    testing::TempDir dir;
    train::FinetuneOptions opts;
    opts.checkpoint_dir = dir.path().string();
    train::finetune_contrastive(rg, ng, data, config, opts);
    const auto rows = train::parse_loss_log(read_file(dir.file("loss.tsv")));
    double worst = 0;
    for (const auto& r : rows) worst = std::max(worst, std::abs(r.total - (0.2 * r.l_r + 1.0 * r.l_n + 0.3 * r.l_trip)));
    return {!rows.empty() && worst <= k_identity_tol,
            std::to_string(rows.size()) + " logged rows, max |total - weighted sum| " + fmt("%.2e", worst)};
}

Verdict uniform_losses() {
    const auto s = testing::separable_corpus(4, 0, corpus::Split::train);
    const auto m = testing::make_model(texts_of(s), 301, true);
    const double lnv = std::log(static_cast<double>(m.vocab_size()));
    double worst = 0;
    for (const auto& r : s.rationale) {
        worst = std::max(worst, std::abs(train::rationale_loss(m, {r}) - m.target_length(r.rationale) * lnv));
    }
    for (const auto& n : s.norm) {
        worst = std::max(worst, std::abs(train::norm_loss(m, {n}) - m.target_length(n.norm) * lnv));
    }
    return {worst <= k_uniform_tol, std::to_string(s.rationale.size() + s.norm.size()) + " targets, V=" +
                                        std::to_string(m.vocab_size()) + ", max |err| " + fmt("%.2e", worst)};
}

Verdict overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    // 16 groups give 32 scorer examples.
    const auto big = testing::separable_corpus(8, 0, corpus::Split::train);
    auto scorer = testing::make_model(texts_of(big), 401);
    const auto items = scorer_items(big);
    train::pretrain(train::Task::scorer, scorer, {{}, {}, items}, testing::fast_config(401, k_scorer_steps));
    std::size_t correct = 0, total = 0;
    for (const auto& inst : train::expand(items)) {
        const auto action = items[total / 3].action;
        const std::string context = inst.prefix == TaskPrefix::score_action ? ""
                                    : inst.prefix == TaskPrefix::score_norm ? items[total / 3].norm
                                                                           : items[total / 3].rationale;
        const auto dist = model::label_score(scorer, inst.prefix, action, context);
        correct += dist.argmax() == items[total / 3].label;
        ++total;
    }
    const double accuracy = static_cast<double>(correct) / static_cast<double>(total);

    // 8 groups give 16 rationale pairs and 16 norm pairs.
    const auto small = testing::separable_corpus(4, 0, corpus::Split::train);
    const train::TaskData data{small.rationale, small.norm, {}};
    auto rg = testing::make_model(texts_of(small), 402);
    auto ng = testing::make_model(texts_of(small), 403);
    train::pretrain(train::Task::rationale, rg, data, testing::fast_config(402, k_generator_steps));
    train::pretrain(train::Task::norm, ng, data, testing::fast_config(403, k_generator_steps));
    model::GenerationOptions greedy;
    greedy.max_tokens = 48;
    std::size_t verbatim = 0;
    for (const auto& r : small.rationale) {
        verbatim += model::generate(rg, r.prefix, r.action, greedy).text == normalize_whitespace(r.rationale);
    }
    for (const auto& n : small.norm) {
        verbatim += model::generate(ng, TaskPrefix::abstract_norm, n.rationale, greedy).text == normalize_whitespace(n.norm);
    }
    const std::size_t pairs = small.rationale.size() + small.norm.size();
    const double secs = seconds_since(t0);
    return {accuracy >= k_scorer_accuracy && verbatim == pairs && secs < k_overfit_seconds,
            "scorer " + std::to_string(correct) + "/" + std::to_string(total) + " (" + std::to_string(items.size()) +
                " examples x 3 settings) after " + std::to_string(k_scorer_steps) + " steps, generators verbatim " +
                std::to_string(verbatim) + "/" + std::to_string(pairs) + ", " + fmt("%.0f", secs) + " s"};
}

Verdict contrastive_effect() {
    const auto train_set = testing::separable_corpus(8, 0, corpus::Split::train);
    const auto held = testing::separable_corpus(4, 8, corpus::Split::test);
    std::vector<std::string> texts = texts_of(train_set);
    for (const auto& a : held.corpus.actions()) texts.push_back(a.text);
    const auto tok = testing::tokenizer_for(texts);
    model::DeskTransformer rg(testing::small_config(501), tok);
    model::DeskTransformer ng(testing::small_config(502), tok);
    const train::TaskData data{train_set.rationale, train_set.norm, {}};
    train::pretrain(train::Task::rationale, rg, data, testing::fast_config(503, k_generator_steps));
    train::pretrain(train::Task::norm, ng, data, testing::fast_config(503, k_generator_steps));

    const auto held_triplets = testing::cross_norm_triplets(held.corpus, 64, 504);
    const auto mode = train::TripletEmbedding::encoder_pooled;
    const auto before = train::contrastive_stats(rg, ng, held.corpus, held_triplets, mode, 32);

    train::FinetuneData ft{&train_set.corpus, train_set.rationale, train_set.norm,
                           testing::cross_norm_triplets(train_set.corpus, 64, 505)};
    auto config = testing::fast_config(506, 100000);
    config.learning_rate = 1e-3;
    config.epochs = 4;
    config.regenerate_every = 16;
    config.generation_max_tokens = 32;
    train::finetune_contrastive(rg, ng, ft, config);
    const auto after = train::contrastive_stats(rg, ng, held.corpus, held_triplets, mode, 32);

    return {after.satisfied_fraction >= k_contrastive_after && before.satisfied_fraction <= k_contrastive_before,
            "held-out satisfied " + fmt("%.3f", before.satisfied_fraction) + " -> " +
                fmt("%.3f", after.satisfied_fraction) + " (need <= " + fmt("%.2f", k_contrastive_before) +
                " -> >= " + fmt("%.2f", k_contrastive_after) + "), mean d(a,p) " + fmt("%.3f", before.mean_ap) +
                " -> " + fmt("%.3f", after.mean_ap) + ", mean d(a,n) " + fmt("%.3f", before.mean_an) + " -> " +
                fmt("%.3f", after.mean_an)};
}

Verdict metric_oracles() {
    std::vector<std::string> hyps, refs;
    for (const auto& line : split_lines(read_file(testing::fixture("bleu_pairs.jsonl")))) {
        if (trim(line).empty()) continue;
        const auto j = nlohmann::json::parse(line);
        hyps.push_back(j.at("hypothesis").get<std::string>());
        refs.push_back(j.at("reference").get<std::string>());
    }
    const double golden = std::stod(trim(read_file(testing::fixture("bleu_golden.txt"))));
    const double bleu = metrics::corpus_bleu(hyps, refs);
    // TP 40, FN 10, FP 20, TN 30: F1 support 8/11, F1 oppose 2/3.
    const double f1 = metrics::from_confusion(40, 10, 20, 30).macro_f1;
    const double expected_f1 = (8.0 / 11.0 + 2.0 / 3.0) / 2.0;
    const double identity = metrics::corpus_bleu(refs, refs);
    const double sim = metrics::embedding_similarity(refs, refs, metrics::HashedBowEmbedder{}).mean;
    const bool ok = std::abs(bleu - golden) <= k_bleu_tol && std::abs(f1 - expected_f1) <= k_exact_tol &&
                    std::abs(identity - 100.0) <= k_exact_tol && std::abs(sim - 1.0) <= k_exact_tol;
    return {ok, "bleu " + fmt("%.6f", bleu) + " vs " + fmt("%.6f", golden) + ", macro-F1 " + fmt("%.12f", f1) +
                    ", identity bleu " + fmt("%.6f", identity) + ", identity similarity " + fmt("%.6f", sim)};
}

std::string quote(const std::string& s) {
    std::string q = "'";
    for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return q + "'";
}

int cli(const std::vector<std::string>& args, const std::string& log) {
    std::string cmd = quote(CLARITY_CLI);
    for (const auto& a : args) cmd += " " + quote(a);
    cmd += " >>" + quote(log) + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool run_chain(const fs::path& run_dir, std::string& failure) {
    const std::string config = testing::fixture("run_config.json");
    const std::string log = (run_dir.parent_path() / (run_dir.filename().string() + ".log")).string();
    const std::vector<std::vector<std::string>> steps{{"distill"},
                                                      {"pretrain", "--task", "rationale"},
                                                      {"pretrain", "--task", "norm"},
                                                      {"pretrain", "--task", "scorer"},
                                                      {"finetune"},
                                                      {"assess"},
                                                      {"evaluate"}};
    for (auto step : steps) {
        const std::string name = step.front();
        step.insert(step.end(), {"--config", config, "--out", run_dir.string()});
        if (const int code = cli(step, log); code != 0) {
            failure = name + " exited " + std::to_string(code) + "\n" + read_file(log);
            return false;
        }
    }
    return true;
}

Verdict determinism() {
    const auto t0 = std::chrono::steady_clock::now();
    testing::TempDir dir;
    std::string failure;
    if (!run_chain(dir.path() / "a", failure) || !run_chain(dir.path() / "b", failure)) return {false, failure};
    const double secs = seconds_since(t0);
    std::vector<std::string> differing;
    for (const char* f : {"assess/assessments.jsonl", "evaluate/report.txt", "evaluate/report.jsonl"}) {
        if (read_file((dir.path() / "a" / f).string()) != read_file((dir.path() / "b" / f).string())) {
            differing.emplace_back(f);
        }
    }
    std::string detail = differing.empty() ? "assessments and reports byte-identical" : "differ:";
    for (const auto& d : differing) detail += " " + d;
    return {differing.empty() && secs < k_chain_seconds, detail + ", two chains in " + fmt("%.0f", secs) + " s"};
}

std::string corpus_violation(const corpus::Corpus& c) {
    std::set<std::string> ids;
    for (const auto& a : c.actions()) {
        if (!ids.insert(a.id).second) return "duplicate id " + a.id;
        if (trim(a.text).empty()) return "empty text in " + a.id;
        if (trim(c.norm(a.norm_id).norm_text).empty()) return "empty norm for " + a.id;
    }
    for (const auto& n : c.norms()) {
        const auto* s = c.find_action(n.supported_action);
        const auto* o = c.find_action(n.opposed_action);
        if (!s || !o) return "dangling action in " + n.norm_id;
        if (s->stance != Stance::support || o->stance != Stance::oppose) return "stance mismatch in " + n.norm_id;
        if (s->norm_id != n.norm_id || o->norm_id != n.norm_id) return "norm id mismatch in " + n.norm_id;
    }
    if (c.actions().size() != 2 * c.norms().size()) return "action/norm count mismatch";
    if (corpus::parse_canonical(corpus::to_canonical(c)).actions().size() != c.actions().size()) {
        return "canonical round trip lost actions";
    }
    return "";
}

struct Counts {
    std::size_t support = 0, oppose = 0;
};

Counts count(const corpus::Corpus& c) {
    Counts n;
    for (const auto& a : c.actions()) (a.stance == Stance::support ? n.support : n.oppose)++;
    return n;
}

Verdict data_contracts() {
    struct Source {
        std::string file;
        std::function<corpus::LoadResult(const std::string&)> load;
    };
    const std::vector<Source> fixtures{
        {"moral_stories_train.jsonl", [](const std::string& p) { return corpus::load_moral_stories(p); }},
        {"moral_stories_test.jsonl", [](const std::string& p) { return corpus::load_moral_stories(p, corpus::Split::test); }},
        {"moral_stories_3.jsonl", [](const std::string& p) { return corpus::load_moral_stories(p); }},
        {"ethics_justice.csv", [](const std::string& p) { return corpus::load_ethics(p, corpus::EthicsSubset::justice); }},
        {"ethics_deontology.csv", [](const std::string& p) { return corpus::load_ethics(p, corpus::EthicsSubset::deontology); }},
        {"ethics_virtue.csv", [](const std::string& p) { return corpus::load_ethics(p, corpus::EthicsSubset::virtue); }},
    };
    std::string problems;
    for (const auto& f : fixtures) {
        try {
            const auto r = f.load(testing::fixture(f.file));
            const auto again = f.load(testing::fixture(f.file));
            std::string v = corpus_violation(r.corpus);
            if (v.empty() && !r.errors.empty()) v = "unexpected record errors";
            if (v.empty() && corpus::to_canonical(r.corpus) != corpus::to_canonical(again.corpus)) v = "unstable ids";
            if (v.empty() && r.corpus.actions().empty()) v = "no actions";
            if (!v.empty()) problems += " " + f.file + ": " + v + ";";
        } catch (const std::exception& e) {
            problems += " " + f.file + ": " + e.what() + ";";
        }
    }
    const auto bad = corpus::load_moral_stories(testing::fixture("moral_stories_bad.jsonl"));
    if (bad.errors.size() != 2 || bad.errors[0].line != 2 || bad.errors[1].line != 3) {
        problems += " malformed fixture: expected errors on lines 2 and 3;";
    }

    std::string full = "full-data counts skipped (set CLARITY_DATA_DIR)";
    if (const char* root = std::getenv("CLARITY_DATA_DIR"); root && fs::is_directory(root)) {
        const fs::path base(root);
        std::vector<std::string> checked;
        const auto expect = [&](const std::string& name, Counts got, std::size_t want) {
            checked.push_back(name + " " + std::to_string(got.support) + "/" + std::to_string(got.oppose));
            if (got.support != want || got.oppose != want) problems += " " + name + " counts differ;";
        };
        for (const auto& [file, split, want] :
             {std::tuple{"train.jsonl", corpus::Split::train, 10999u}, std::tuple{"test.jsonl", corpus::Split::test, 1000u}}) {
            const fs::path p = base / "moral_stories" / file;
            if (fs::exists(p)) expect("moral_stories/" + std::string(file), count(corpus::load_moral_stories(p.string(), split).corpus), want);
        }
        for (const auto& [suffix, split, want] :
             {std::tuple{"train", corpus::Split::train, 4581u}, std::tuple{"test", corpus::Split::test, 1218u}}) {
            Counts pooled;
            bool any = false;
            for (const auto& [name, subset] : {std::pair{"justice", corpus::EthicsSubset::justice},
                                               std::pair{"deontology", corpus::EthicsSubset::deontology},
                                               std::pair{"virtue", corpus::EthicsSubset::virtue}}) {
                const fs::path p = base / "ethics" / (std::string(name) + "_" + suffix + ".csv");
                if (!fs::exists(p)) continue;
                any = true;
                const auto n = count(corpus::load_ethics(p.string(), subset, split).corpus);
                pooled.support += n.support;
                pooled.oppose += n.oppose;
            }
            if (any) expect("ethics " + std::string(suffix), pooled, want);
        }
        full = checked.empty() ? "full-data counts skipped (no dataset files found)" : "full data:";
        for (const auto& c : checked) full += " " + c;
    }
    return {problems.empty(), (problems.empty() ? "6 fixtures satisfy the invariants" : "violations:" + problems) +
                                  ", " + full};
}

Verdict prompt_fidelity() {
    const std::string expected_rationale =
        "Given the social norm: It is good to be honest, please follow the steps below to arrive at a final answer:\n"
        "Step 1. Consider the moral implications and relationships between the following actions: Action 1: Tom "
        "returns the wallet and Action 2: Tom keeps the wallet.\n"
        "Step 2. Provide both supporting and opposing rationales for each action, considering the context of the "
        "given social norm.";
    const std::string expected_cot =
        "Given an action: Tom keeps the wallet.\n"
        "To arrive at a final answer, please follow the steps below:\n"
        "Step 1: Identify a social norm that supports the action and provide a rationale for it.\n"
        "Step 2: Identify a social norm that opposes the action and provide a rationale for it.\n"
        "Step 3: Determine which rationale and norm are more reasonable. Consider all factors and predict the overall "
        "valence.\n"
        "Answer choice: a) support b) oppose";
    const std::vector<std::pair<TaskPrefix, std::string>> prefixes{
        {TaskPrefix::explain_support, "Explain why to support the action:"},
        {TaskPrefix::explain_oppose, "Explain why to oppose the action:"},
        {TaskPrefix::abstract_norm, "Abstract and generalize rationale as a social norm:"},
        {TaskPrefix::score_action, "Predict the score with action only:"},
        {TaskPrefix::score_norm, "Predict the score with action and norm:"},
        {TaskPrefix::score_rationale, "Predict the score with action and rationale:"},
    };
    std::string problems;
    if (distill::render_rationale_prompt("It is good to be honest", "Tom returns the wallet", "Tom keeps the wallet") !=
        expected_rationale) {
        problems += " distillation prompt;";
    }
    if (distill::render_claritycot_prompt("Tom keeps the wallet") != expected_cot) problems += " claritycot prompt;";
    std::size_t exact = 0;
    for (const auto& [p, text] : prefixes) {
        if (model::prefix_text(p) == text) {
            ++exact;
        } else {
            problems += " prefix " + std::string(model::prefix_name(p)) + ";";
        }
    }
    return {problems.empty(), problems.empty() ? "both templates byte-exact, " + std::to_string(exact) + "/6 prefixes exact"
                                               : "mismatch:" + problems};
}

}  // namespace

int main() {
    log::set_min_level(log::Level::error);
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"triplet-loss oracle", triplet_oracle},
        {"combined-loss identity", loss_identity},
        {"uniform-logit analytic losses", uniform_losses},
        {"overfit run", overfit},
        {"contrastive effect", contrastive_effect},
        {"metric oracles", metric_oracles},
        {"determinism", determinism},
        {"data contracts", data_contracts},
        {"prompt fidelity", prompt_fidelity},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failed += !v.pass;
        std::printf("%s %zu %s: %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), v.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
