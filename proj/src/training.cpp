#include "clarity/training.hpp"
#include "clarity/log.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace clarity::train {

using autograd::Tensor;
using model::TaskPrefix;
using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(TripletEmbedding e) noexcept {
    return e == TripletEmbedding::encoder_pooled ? "encoder_pooled" : "reference_norm_decoder";
}

TripletEmbedding parse_triplet_embedding(std::string_view text) {
    if (text == "encoder_pooled") return TripletEmbedding::encoder_pooled;
    if (text == "reference_norm_decoder") return TripletEmbedding::reference_norm_decoder;
    throw ConfigError("unknown triplet embedding '" + std::string(text) + "'");
}

std::string_view to_string(Task t) noexcept {
    switch (t) {
        case Task::rationale: return "rationale";
        case Task::norm: return "norm";
        case Task::scorer: return "scorer";
    }
    return "";
}

Task parse_task(std::string_view text) {
    if (text == "rationale") return Task::rationale;
    if (text == "norm") return Task::norm;
    if (text == "scorer") return Task::scorer;
    throw ConfigError("unknown task '" + std::string(text) + "' (expected rationale, norm or scorer)");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (max_input_tokens < 2) fail("max_input_tokens must be >= 2");
    if (max_steps < 0) fail("max_steps must be >= 0");
    if (epochs < 0) fail("epochs must be >= 0");
    if (!(margin > 0) || !std::isfinite(margin)) fail("margin must be in (0, inf)");
    if (lambda_r < 0 || lambda_n < 0 || lambda_trip < 0) fail("lambda weights must be >= 0");
    if (!(validation_fraction >= 0 && validation_fraction < 1)) fail("validation_fraction must be in [0, 1)");
    if (validation_interval < 1) fail("validation_interval must be >= 1");
    if (triplet_count < 1 || triplet_batch_size < 1) fail("triplet_count and triplet_batch_size must be >= 1");
    if (regenerate_every < 1) fail("regenerate_every must be >= 1");
    if (generation_max_tokens < 0) fail("generation_max_tokens must be >= 0");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1 && adam_eps > 0)) {
        fail("invalid Adam parameters");
    }
    if (margin < 0.1 || margin > 0.5) log::warn("margin " + std::to_string(margin) + " is outside 0.1-0.5");
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"learning_rate", c.learning_rate},
             {"batch_size", c.batch_size},
             {"max_input_tokens", c.max_input_tokens},
             {"max_steps", c.max_steps},
             {"epochs", c.epochs},
             {"margin", c.margin},
             {"lambda_r", c.lambda_r},
             {"lambda_n", c.lambda_n},
             {"lambda_trip", c.lambda_trip},
             {"seed", c.seed},
             {"adam_beta1", c.adam_beta1},
             {"adam_beta2", c.adam_beta2},
             {"adam_eps", c.adam_eps},
             {"validation_fraction", c.validation_fraction},
             {"validation_interval", c.validation_interval},
             {"triplet_count", c.triplet_count},
             {"triplet_batch_size", c.triplet_batch_size},
             {"stance_matched_negatives", c.stance_matched_negatives},
             {"regenerate_every", c.regenerate_every},
             {"generation_max_tokens", c.generation_max_tokens},
             {"triplet_embedding", std::string(to_string(c.triplet_embedding))}};
}

void from_json(const json& j, TrainConfig& c) {
    if (!j.is_object()) throw ConfigError("train config must be an object");
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "learning_rate") c.learning_rate = value.get<double>();
            else if (key == "batch_size") c.batch_size = value.get<int>();
            else if (key == "max_input_tokens") c.max_input_tokens = value.get<int>();
            else if (key == "max_steps") c.max_steps = value.get<int>();
            else if (key == "epochs") c.epochs = value.get<int>();
            else if (key == "margin") c.margin = value.get<double>();
            else if (key == "lambda_r") c.lambda_r = value.get<double>();
            else if (key == "lambda_n") c.lambda_n = value.get<double>();
            else if (key == "lambda_trip") c.lambda_trip = value.get<double>();
            else if (key == "seed") c.seed = value.get<std::uint64_t>();
            else if (key == "adam_beta1") c.adam_beta1 = value.get<double>();
            else if (key == "adam_beta2") c.adam_beta2 = value.get<double>();
            else if (key == "adam_eps") c.adam_eps = value.get<double>();
            else if (key == "validation_fraction") c.validation_fraction = value.get<double>();
            else if (key == "validation_interval") c.validation_interval = value.get<int>();
            else if (key == "triplet_count") c.triplet_count = value.get<int>();
            else if (key == "triplet_batch_size") c.triplet_batch_size = value.get<int>();
            else if (key == "stance_matched_negatives") c.stance_matched_negatives = value.get<bool>();
            else if (key == "regenerate_every") c.regenerate_every = value.get<int>();
            else if (key == "generation_max_tokens") c.generation_max_tokens = value.get<int>();
            else if (key == "triplet_embedding") c.triplet_embedding = parse_triplet_embedding(value.get<std::string>());
            else throw ConfigError("unknown train config key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("train config key '" + key + "': " + e.what());
        }
    }
}

// ---------------------------------------------------------------------------
// Examples

RationaleExample make_rationale_example(std::string action, Stance stance, std::string rationale) {
    return RationaleExample{std::move(action), stance, std::move(rationale), model::rationale_prefix(stance)};
}

std::vector<Instance> expand(const std::vector<RationaleExample>& batch) {
    std::vector<Instance> out;
    out.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& e = batch[i];
        if (e.prefix != model::rationale_prefix(e.stance)) {
            throw ContractError("rationale item " + std::to_string(i) + ": prefix " +
                                std::string(model::prefix_name(e.prefix)) + " does not match stance " +
                                std::string(to_string(e.stance)));
        }
        if (trim(e.rationale).empty()) throw ContractError("rationale item " + std::to_string(i) + ": empty rationale");
        out.push_back({e.prefix, e.action, e.rationale});
    }
    return out;
}

std::vector<Instance> expand(const std::vector<NormExample>& batch) {
    std::vector<Instance> out;
    out.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (trim(batch[i].norm).empty()) throw ContractError("norm item " + std::to_string(i) + ": empty reference norm");
        out.push_back({TaskPrefix::abstract_norm, batch[i].rationale, batch[i].norm});
    }
    return out;
}

std::vector<Instance> expand(const std::vector<ScorerExample>& batch, ScorerSettings settings) {
    std::vector<Instance> out;
    out.reserve(batch.size() * 3);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& e = batch[i];
        const std::string label(to_string(e.label));
        if (settings.action_only) out.push_back({TaskPrefix::score_action, model::scorer_input(e.action, ""), label});
        if (settings.with_norm) {
            if (trim(e.norm).empty()) throw ContractError("scorer item " + std::to_string(i) + ": missing norm");
            out.push_back({TaskPrefix::score_norm, model::scorer_input(e.action, e.norm), label});
        }
        if (settings.with_rationale) {
            if (trim(e.rationale).empty()) {
                throw ContractError("scorer item " + std::to_string(i) + ": missing rationale");
            }
            out.push_back({TaskPrefix::score_rationale, model::scorer_input(e.action, e.rationale), label});
        }
    }
    return out;
}

std::string serialize(const Instance& instance) {
    return model::compose_input(instance.prefix, instance.input) + "\t" + normalize_whitespace(instance.target);
}

// ---------------------------------------------------------------------------
// Losses

namespace {

Tensor mean_nll(const model::TextToTextModel& m, const std::vector<Instance>& instances) {
    if (instances.empty()) throw ContractError("loss over an empty batch");
    Tensor total;
    for (const auto& in : instances) {
        Tensor ll = m.target_log_likelihood(in.prefix, in.input, in.target);
        total = total.defined() ? autograd::add(total, ll) : ll;
    }
    return autograd::scale(total, -1.0 / static_cast<double>(instances.size()));
}

double detached(const Tensor& t) { return t.item(); }

}  // namespace

Tensor rationale_loss_tensor(const model::TextToTextModel& m, const std::vector<RationaleExample>& batch) {
    return mean_nll(m, expand(batch));
}

Tensor norm_loss_tensor(const model::TextToTextModel& m, const std::vector<NormExample>& batch) {
    return mean_nll(m, expand(batch));
}

Tensor scorer_loss_tensor(const model::TextToTextModel& m, const std::vector<ScorerExample>& batch,
                          ScorerSettings settings) {
    const auto instances = expand(batch, settings);
    if (instances.empty()) throw ContractError("scorer loss over an empty batch");
    Tensor total;
    for (const auto& in : instances) {
        Tensor lp = m.label_log_probs(in.prefix, in.input);
        Tensor picked = autograd::slice_cols(lp, in.target == model::k_support_label ? 0 : 1, 1);
        total = total.defined() ? autograd::add(total, picked) : picked;
    }
    return autograd::scale(total, -1.0 / static_cast<double>(instances.size()));
}

double rationale_loss(const model::TextToTextModel& m, const std::vector<RationaleExample>& batch) {
    autograd::NoGradGuard guard;
    return detached(rationale_loss_tensor(m, batch));
}

double norm_loss(const model::TextToTextModel& m, const std::vector<NormExample>& batch) {
    autograd::NoGradGuard guard;
    return detached(norm_loss_tensor(m, batch));
}

double scorer_loss(const model::TextToTextModel& m, const std::vector<ScorerExample>& batch, ScorerSettings settings) {
    autograd::NoGradGuard guard;
    return detached(scorer_loss_tensor(m, batch, settings));
}

Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative, double alpha) {
    if (anchor.rows() != positive.rows() || anchor.cols() != positive.cols() || anchor.rows() != negative.rows() ||
        anchor.cols() != negative.cols()) {
        throw ContractError("triplet_loss: embedding dimension mismatch");
    }
    Tensor gap = autograd::sub(autograd::l2_norm(autograd::sub(anchor, positive)),
                               autograd::l2_norm(autograd::sub(anchor, negative)));
    return autograd::relu(autograd::add_scalar(gap, alpha));
}

double triplet_loss(const model::NormEmbedding& anchor, const model::NormEmbedding& positive,
                    const model::NormEmbedding& negative, double alpha) {
    if (anchor.dimension() != positive.dimension() || anchor.dimension() != negative.dimension()) {
        throw ContractError("triplet_loss: embedding dimension mismatch");
    }
    autograd::NoGradGuard guard;
    auto row = [](const model::NormEmbedding& e) {
        return Tensor(Eigen::Map<const autograd::Matrix>(e.values.data(), 1, static_cast<Eigen::Index>(e.dimension())));
    };
    return triplet_loss(row(anchor), row(positive), row(negative), alpha).item();
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.push_back(autograd::Matrix::Zero(p.rows(), p.cols()));
        v_.push_back(autograd::Matrix::Zero(p.rows(), p.cols()));
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        if (!p.has_grad()) continue;
        const auto& g = p.grad();
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
        p.mutable_value().array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Shared loop plumbing

namespace {

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

SplitIndices split_indices(std::size_t n, double fraction, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction));
    if (n_val >= n) n_val = n == 0 ? 0 : n - 1;
    SplitIndices s;
    s.validation.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::sort(s.validation.begin(), s.validation.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

/// Endless reshuffled pass over a pool of indices.
class BatchCursor {
public:
    BatchCursor(std::vector<std::size_t> pool, std::uint64_t seed) : pool_(std::move(pool)), rng_(seed) {
        std::shuffle(pool_.begin(), pool_.end(), rng_);
    }
    std::vector<std::size_t> next(std::size_t n) {
        std::vector<std::size_t> out;
        if (pool_.empty()) return out;
        while (out.size() < n) {
            if (pos_ == pool_.size()) {
                std::shuffle(pool_.begin(), pool_.end(), rng_);
                pos_ = 0;
            }
            out.push_back(pool_[pos_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> pool_;
    std::mt19937_64 rng_;
    std::size_t pos_ = 0;
};

template <typename T>
std::vector<T> gather(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(items[i]);
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void check_finite(double loss, int step) {
    if (!std::isfinite(loss)) throw ModelError("non-finite loss at step " + std::to_string(step));
}

void write_checkpoint(const model::DeskTransformer& model, const fs::path& dir, const TrainConfig& config,
                      std::string_view task, std::string_view log) {
    fs::create_directories(dir);
    model.save((dir / "model.ckpt").string());
    json snapshot{{"task", std::string(task)}, {"train", config}, {"model", model.config()}};
    write_file_atomic((dir / "config.json").string(), snapshot.dump(2) + "\n");
    write_file_atomic((dir / "loss.tsv").string(), log);
}

void write_best_pointer(const fs::path& dir, int step) {
    write_file_atomic((dir / "best").string(), std::to_string(step) + "\n");
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1

PretrainResult pretrain(Task task, model::DeskTransformer& model, const TaskData& data, const TrainConfig& config,
                        const PretrainOptions& options) {
    config.validate();
    std::size_t n = 0;
    switch (task) {
        case Task::rationale: n = data.rationale.size(); break;
        case Task::norm: n = data.norm.size(); break;
        case Task::scorer: n = data.scorer.size(); break;
    }
    if (n == 0) throw DataError("pretrain " + std::string(to_string(task)) + ": no training data");

    auto batch_loss = [&](const std::vector<std::size_t>& idx) -> Tensor {
        switch (task) {
            case Task::rationale: return rationale_loss_tensor(model, gather(data.rationale, idx));
            case Task::norm: return norm_loss_tensor(model, gather(data.norm, idx));
            case Task::scorer: return scorer_loss_tensor(model, gather(data.scorer, idx), options.scorer_settings);
        }
        throw ContractError("unknown task");
    };

    std::mt19937_64 rng(config.seed);
    const auto split = split_indices(n, config.validation_fraction, rng);
    BatchCursor cursor(split.train, rng());
    Adam adam(model.parameters(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);

    PretrainResult result;
    std::string log = "step\tloss\tvalidation\n";
    const fs::path dir = options.checkpoint_dir;
    const bool persist = !options.checkpoint_dir.empty();
    std::optional<model::DeskTransformer> best;
    double best_val = std::numeric_limits<double>::infinity();

    auto validate = [&](int step) {
        autograd::NoGradGuard guard;
        const double v = batch_loss(split.validation).item();
        result.validation.emplace_back(step, v);
        if (v < best_val) {
            best_val = v;
            result.best_step = step;
            best.emplace(model);
            return true;
        }
        return false;
    };

    for (int step = 1; step <= config.max_steps; ++step) {
        adam.zero_grad();
        Tensor loss = batch_loss(cursor.next(static_cast<std::size_t>(config.batch_size)));
        const double value = loss.item();
        check_finite(value, step);
        loss.backward();
        adam.step();
        result.losses.push_back(value);
        if (options.on_step) options.on_step(step, value);

        std::string val_col = "-";
        const bool last = step == config.max_steps;
        bool improved = false;
        if (!split.validation.empty() && (step % config.validation_interval == 0 || last)) {
            improved = validate(step);
            val_col = fmt(result.validation.back().second);
        }
        log += std::to_string(step) + "\t" + fmt(value) + "\t" + val_col + "\n";
        if (persist && (improved || last)) {
            write_checkpoint(model, dir / std::to_string(step), config, to_string(task), log);
        }
    }

    if (split.validation.empty() || config.max_steps == 0) {
        result.best_step = config.max_steps;
        best.reset();
        if (persist && config.max_steps == 0) write_checkpoint(model, dir / "0", config, to_string(task), log);
    }
    if (best) model = *best;
    if (persist) {
        write_file_atomic((dir / "loss.tsv").string(), log);
        write_best_pointer(dir, result.best_step);
    }
    result.final_loss = result.losses.empty() ? 0.0 : result.losses.back();
    return result;
}

// ---------------------------------------------------------------------------
// Stage 2

TripletEmbedder::TripletEmbedder(const model::TextToTextModel& rationale_gen, const corpus::Corpus& corpus,
                                 TripletEmbedding mode, int generation_max_tokens)
    : rationale_gen_(rationale_gen), corpus_(corpus), mode_(mode), max_tokens_(generation_max_tokens) {}

const std::string& TripletEmbedder::rationale_for(const std::string& action_id) {
    auto it = rationales_.find(action_id);
    if (it != rationales_.end()) return it->second;
    const auto& action = corpus_.action(action_id);
    model::GenerationOptions opts;
    opts.max_tokens = max_tokens_;
    auto gen = model::generate(rationale_gen_, model::rationale_prefix(action.stance), action.text, opts);
    return rationales_.emplace(action_id, std::move(gen.text)).first->second;
}

Tensor TripletEmbedder::embed(const model::TextToTextModel& norm_gen, const std::string& action_id) {
    const std::string& rationale = rationale_for(action_id);
    if (mode_ == TripletEmbedding::encoder_pooled) {
        return model::input_representation_tensor(norm_gen, TaskPrefix::abstract_norm, rationale);
    }
    return model::norm_representation_tensor(norm_gen, TaskPrefix::abstract_norm, rationale,
                                             corpus_.norm_text_of(action_id));
}

ContrastiveStats contrastive_stats(const model::TextToTextModel& rationale_gen, const model::TextToTextModel& norm_gen,
                                   const corpus::Corpus& corpus, const std::vector<corpus::TripletExample>& triplets,
                                   TripletEmbedding mode, int generation_max_tokens) {
    if (triplets.empty()) throw ContractError("contrastive_stats: no triplets");
    autograd::NoGradGuard guard;
    TripletEmbedder embedder(rationale_gen, corpus, mode, generation_max_tokens);
    ContrastiveStats s;
    std::size_t satisfied = 0;
    for (const auto& t : triplets) {
        const auto a = embedder.embed(norm_gen, t.anchor).value();
        const auto p = embedder.embed(norm_gen, t.positive).value();
        const auto n = embedder.embed(norm_gen, t.negative).value();
        const double ap = (a - p).norm();
        const double an = (a - n).norm();
        s.mean_ap += ap;
        s.mean_an += an;
        if (ap < an) ++satisfied;
    }
    const auto count = static_cast<double>(triplets.size());
    s.satisfied_fraction = static_cast<double>(satisfied) / count;
    s.mean_ap /= count;
    s.mean_an /= count;
    return s;
}

FinetuneResult finetune_contrastive(model::DeskTransformer& rationale_gen, model::DeskTransformer& norm_gen,
                                    const FinetuneData& data, const TrainConfig& config,
                                    const FinetuneOptions& options) {
    config.validate();
    if (data.corpus == nullptr) throw ContractError("finetune: corpus required to resolve triplets");
    if (data.rationale_supervision.empty() || data.norm_supervision.empty()) {
        throw DataError("finetune: rationale and norm supervision must be nonempty");
    }
    if (data.triplets.empty()) throw DataError("finetune: no triplets");

    std::mt19937_64 rng(config.seed);
    const auto r_split = split_indices(data.rationale_supervision.size(), config.validation_fraction, rng);
    const auto n_split = split_indices(data.norm_supervision.size(), config.validation_fraction, rng);
    const auto t_split = split_indices(data.triplets.size(), config.validation_fraction, rng);
    BatchCursor r_cursor(r_split.train, rng());
    BatchCursor n_cursor(n_split.train, rng());
    BatchCursor t_cursor(t_split.train, rng());

    Adam r_opt(rationale_gen.parameters(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
    Adam n_opt(norm_gen.parameters(), config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps);
    TripletEmbedder embedder(rationale_gen, *data.corpus, config.triplet_embedding, config.generation_max_tokens);

    const auto tb = static_cast<std::size_t>(config.triplet_batch_size);
    const int steps_per_epoch = static_cast<int>((t_split.train.size() + tb - 1) / tb);
    const int total_steps = std::min(config.epochs * steps_per_epoch, config.max_steps);
    const bool has_validation = !r_split.validation.empty() || !n_split.validation.empty() ||
                                !t_split.validation.empty();

    FinetuneResult result;
    const fs::path dir = options.checkpoint_dir;
    const bool persist = !options.checkpoint_dir.empty();
    std::optional<model::DeskTransformer> best_r, best_n;
    double best_val = std::numeric_limits<double>::infinity();

    auto validation_loss = [&] {
        autograd::NoGradGuard guard;
        double v = 0;
        if (!r_split.validation.empty()) {
            v += config.lambda_r * rationale_loss(rationale_gen, gather(data.rationale_supervision, r_split.validation));
        }
        if (!n_split.validation.empty()) {
            v += config.lambda_n * norm_loss(norm_gen, gather(data.norm_supervision, n_split.validation));
        }
        if (!t_split.validation.empty()) {
            double trip = 0;
            for (auto i : t_split.validation) {
                const auto& t = data.triplets[i];
                trip += triplet_loss(embedder.embed(norm_gen, t.anchor), embedder.embed(norm_gen, t.positive),
                                     embedder.embed(norm_gen, t.negative), config.margin)
                            .item();
            }
            v += config.lambda_trip * trip / static_cast<double>(t_split.validation.size());
        }
        return v;
    };

    auto save_pair = [&](int step) {
        const std::string log = format_loss_log(result.reports);
        write_checkpoint(rationale_gen, dir / "rationale" / std::to_string(step), config, "finetune-rationale", log);
        write_checkpoint(norm_gen, dir / "norm" / std::to_string(step), config, "finetune-norm", log);
    };

    for (int step = 1; step <= total_steps; ++step) {
        if ((step - 1) % config.regenerate_every == 0) embedder.invalidate();
        r_opt.zero_grad();
        n_opt.zero_grad();

        Tensor l_r = rationale_loss_tensor(
            rationale_gen, gather(data.rationale_supervision, r_cursor.next(static_cast<std::size_t>(config.batch_size))));
        Tensor l_n = norm_loss_tensor(
            norm_gen, gather(data.norm_supervision, n_cursor.next(static_cast<std::size_t>(config.batch_size))));
        Tensor l_trip;
        for (auto i : t_cursor.next(tb)) {
            const auto& t = data.triplets[i];
            Tensor term = triplet_loss(embedder.embed(norm_gen, t.anchor), embedder.embed(norm_gen, t.positive),
                                       embedder.embed(norm_gen, t.negative), config.margin);
            l_trip = l_trip.defined() ? autograd::add(l_trip, term) : term;
        }
        Tensor total = autograd::add(autograd::add(autograd::scale(l_r, config.lambda_r),
                                                   autograd::scale(l_n, config.lambda_n)),
                                     autograd::scale(l_trip, config.lambda_trip));

        LossReport report{step, l_r.item(), l_n.item(), l_trip.item(), total.item()};
        check_finite(report.total, step);
        total.backward();
        r_opt.step();
        n_opt.step();
        result.reports.push_back(report);
        if (options.on_step) options.on_step(report);

        const bool last = step == total_steps;
        bool improved = false;
        if (has_validation && (step % config.validation_interval == 0 || last)) {
            const double v = validation_loss();
            result.validation.emplace_back(step, v);
            if (v < best_val) {
                best_val = v;
                result.best_step = step;
                best_r.emplace(rationale_gen);
                best_n.emplace(norm_gen);
                improved = true;
            }
        }
        if (persist && (improved || last)) save_pair(step);
    }

    if (!has_validation || total_steps == 0) {
        result.best_step = total_steps;
        best_r.reset();
        best_n.reset();
        if (persist && total_steps == 0) save_pair(0);
    }
    if (best_r) rationale_gen = *best_r;
    if (best_n) norm_gen = *best_n;
    if (persist) {
        write_file_atomic((dir / "loss.tsv").string(), format_loss_log(result.reports));
        write_best_pointer(dir / "rationale", result.best_step);
        write_best_pointer(dir / "norm", result.best_step);
    }
    return result;
}

std::vector<SweepPoint> alpha_sweep(const TrainConfig& base, const std::vector<double>& alphas,
                                    const std::vector<std::uint64_t>& seeds,
                                    const std::function<double(const TrainConfig&)>& run) {
    std::vector<SweepPoint> out;
    for (double alpha : alphas) {
        for (auto seed : seeds) {
            TrainConfig c = base;
            c.margin = alpha;
            c.seed = seed;
            c.validate();
            out.push_back({alpha, seed, run(c)});
        }
    }
    return out;
}

std::string format_loss_log(const std::vector<LossReport>& reports) {
    std::string out = "step\tl_r\tl_n\tl_trip\ttotal\n";
    for (const auto& r : reports) {
        out += std::to_string(r.step) + "\t" + fmt(r.l_r) + "\t" + fmt(r.l_n) + "\t" + fmt(r.l_trip) + "\t" +
               fmt(r.total) + "\n";
    }
    return out;
}

std::vector<LossReport> parse_loss_log(std::string_view text) {
    std::vector<LossReport> out;
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (i == 0 || trim(lines[i]).empty()) continue;
        std::istringstream in(lines[i]);
        LossReport r;
        if (!(in >> r.step >> r.l_r >> r.l_n >> r.l_trip >> r.total)) {
            throw DataError("malformed loss log line " + std::to_string(i + 1));
        }
        out.push_back(r);
    }
    return out;
}

}  // namespace clarity::train
