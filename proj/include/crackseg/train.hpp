#pragma once

// Epoch loop: minibatch ADAM updates on the weighted cross-entropy (or Dice)
// objective, per-epoch validation, patience-based early stopping, best-epoch
// selection and resumable checkpoints.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crackseg/adam.hpp"
#include "crackseg/checkpoint.hpp"
#include "crackseg/data.hpp"
#include "crackseg/error.hpp"
#include "crackseg/json_config.hpp"
#include "crackseg/losses.hpp"
#include "crackseg/unet.hpp"

namespace crackseg {

enum class LossKind { weighted_ce, dice };

inline std::string to_string(LossKind k) { return k == LossKind::weighted_ce ? "weighted-ce" : "dice"; }

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "weighted-ce") return LossKind::weighted_ce;
    if (s == "dice") return LossKind::dice;
    throw ConfigError("unknown loss '" + s + "' (expected weighted-ce or dice)");
}

struct TrainConfig {
    std::size_t max_epochs = 30;
    std::size_t batch_size = 32;
    double eta = 1e-4;
    bool constant_eta = false;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double lambda = 1.0;
    double epsilon = 1e-8;
    LossKind loss = LossKind::weighted_ce;
    WeightScheme weight_scheme = WeightScheme::median_frequency;
    std::size_t patience = 10;
    std::uint64_t seed = 0;
    /// Fraction of sources used for training. 1.0 validates on the training set.
    double split_fraction = 0.8;
    /// Stop as soon as validation accuracy reaches this value.
    std::optional<double> target_accuracy;
    std::size_t workers = 1;

    AdamConfig adam() const { return {eta, beta1, beta2, lambda, epsilon, constant_eta}; }

    void validate() const {
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (patience < 1) throw ConfigError("patience must be >= 1");
        if (workers < 1) throw ConfigError("workers must be >= 1");
        if (!(split_fraction > 0.0 && split_fraction <= 1.0)) throw ConfigError("split_fraction must lie in (0, 1]");
        adam().validate();
    }
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    double seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    std::string stop_reason;
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
    std::vector<std::string> warnings;
};

struct TrainResult {
    UNetParams<float> params;  // best validation epoch
    TrainLog log;
    Checkpoint checkpoint;     // state after the last completed epoch
};

// ---------------------------------------------------------------- json

/// Settings that shape the optimization trajectory. Stored in checkpoints;
/// run limits (max_epochs, target_accuracy, workers) are not.
inline json trajectory_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size}, {"eta", c.eta},           {"constant_eta", c.constant_eta},
            {"beta1", c.beta1},           {"beta2", c.beta2},       {"lambda", c.lambda},
            {"epsilon", c.epsilon},       {"loss", to_string(c.loss)}, {"weight_scheme", to_string(c.weight_scheme)},
            {"patience", c.patience},     {"seed", c.seed},         {"split_fraction", c.split_fraction}};
}

inline json to_json(const TrainConfig& c) {
    json j = trajectory_json(c);
    j["max_epochs"] = c.max_epochs;
    j["workers"] = c.workers;
    if (c.target_accuracy) j["target_accuracy"] = *c.target_accuracy;
    return j;
}

inline TrainConfig train_config_from_json(const json& j, const std::string& path = "train") {
    TrainConfig c;
    StrictObject<> o(j, path);
    o.read("max_epochs", c.max_epochs);
    o.read("batch_size", c.batch_size);
    o.read("eta", c.eta);
    o.read("constant_eta", c.constant_eta);
    o.read("beta1", c.beta1);
    o.read("beta2", c.beta2);
    o.read("lambda", c.lambda);
    o.read("epsilon", c.epsilon);
    std::string loss = to_string(c.loss), scheme = to_string(c.weight_scheme);
    o.read("loss", loss);
    o.read("weight_scheme", scheme);
    c.loss = parse_loss_kind(loss);
    c.weight_scheme = parse_weight_scheme(scheme);
    o.read("patience", c.patience);
    o.read("seed", c.seed);
    o.read("split_fraction", c.split_fraction);
    if (o.has("target_accuracy")) {
        double t = 0;
        o.read("target_accuracy", t);
        c.target_accuracy = t;
    }
    o.read("workers", c.workers);
    o.finish();
    return c;
}

inline json to_json(const AugmentSpec& a) {
    return {{"rotation_deg", a.rotation_deg},
            {"shear_deg", a.shear_deg},
            {"reflect_horizontal", a.reflect_horizontal},
            {"reflect_vertical", a.reflect_vertical},
            {"multiplier", a.multiplier}};
}

inline AugmentSpec augment_spec_from_json(const json& j, const std::string& path = "augment") {
    AugmentSpec a;
    StrictObject<> o(j, path);
    o.read("rotation_deg", a.rotation_deg);
    o.read("shear_deg", a.shear_deg);
    o.read("reflect_horizontal", a.reflect_horizontal);
    o.read("reflect_vertical", a.reflect_vertical);
    o.read("multiplier", a.multiplier);
    o.finish();
    return a;
}

inline json to_json(const ClassWeights& w) {
    return {{"scheme", to_string(w.scheme)},
            {"alpha", w.alpha},
            {"pixel_counts", w.pixel_counts},
            {"frequencies", w.frequencies}};
}

inline ClassWeights class_weights_from_json(const json& j) {
    ClassWeights w;
    w.scheme = parse_weight_scheme(j.at("scheme").get<std::string>());
    w.alpha = j.at("alpha").get<std::vector<double>>();
    w.pixel_counts = j.at("pixel_counts").get<std::vector<std::uint64_t>>();
    w.frequencies = j.at("frequencies").get<std::vector<double>>();
    return w;
}

inline json to_json(const EpochRecord& r, bool with_time) {
    json j{{"epoch", r.epoch},
           {"train_loss", r.train_loss},
           {"train_acc", r.train_acc},
           {"val_loss", r.val_loss},
           {"val_acc", r.val_acc}};
    if (with_time) j["seconds"] = r.seconds;
    return j;
}

inline void write_trainlog_csv(const std::filesystem::path& path, const TrainLog& log) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw TrainingError(path.string() + ": cannot open for writing");
    f.precision(10);
    f << "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n";
    for (const auto& r : log.epochs)
        f << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.val_loss << ',' << r.val_acc << ','
          << r.seconds << '\n';
}

inline json summary_json(const TrainLog& log) {
    json epochs = json::array();
    for (const auto& r : log.epochs) epochs.push_back(to_json(r, true));
    return {{"stop_reason", log.stop_reason},
            {"best_epoch", log.best_epoch},
            {"best_val_acc", log.best_val_acc},
            {"epochs_completed", log.epochs.size()},
            {"warnings", log.warnings},
            {"epochs", epochs}};
}

// ---------------------------------------------------------------- session

/// Per-channel input means stored with a model.
inline std::vector<double> checkpoint_means(const Checkpoint& ck) {
    if (ck.meta.contains("norm_mean")) return ck.meta.at("norm_mean").get<std::vector<double>>();
    const auto& t = ck.get("norm.mean");
    return {t.values().begin(), t.values().end()};
}

namespace detail {

struct PreparedData {
    std::vector<Sample> train;
    std::vector<Sample> validation;
    std::vector<double> means;
    ClassWeights weights;
};

inline PreparedData prepare_data(const std::vector<Sample>& corpus, const UNetConfig& model, const TrainConfig& cfg,
                                 const AugmentSpec& aug, const std::optional<std::vector<double>>& stored_means) {
    PreparedData d;
    if (corpus.empty()) throw ConfigError("empty training split: corpus has no samples");
    for (const auto& s : corpus)
        if (s.image.height() != model.input_size || s.image.width() != model.input_size ||
            s.image.channels() != model.input_channels)
            throw ConfigError("sample '" + s.source_id + "' does not match the model input shape");
    if (cfg.split_fraction >= 1.0) {
        d.train = corpus;
        d.validation = corpus;
    } else {
        auto sp = split(corpus, cfg.split_fraction, cfg.seed);
        d.train = std::move(sp.train);
        d.validation = std::move(sp.validation);
    }
    if (d.train.empty()) throw ConfigError("empty training split");
    if (d.validation.empty()) d.validation = d.train;
    d.train = augment_corpus(d.train, aug, cfg.seed);
    d.means = stored_means ? *stored_means : channel_means(d.train);

    const auto st = pixel_stats(d.train, model.num_classes);
    if (cfg.loss == LossKind::weighted_ce)
        d.weights = class_weights(st.counts, st.presence_totals, cfg.weight_scheme);
    else
        d.weights = uniform_weights(model.num_classes);

    normalize(d.train, d.means);
    normalize(d.validation, d.means);
    return d;
}

inline LossAndGrad<float> objective(const Tensor<float>& logits, const Tensor<float>& labels, LossKind kind,
                                    const ClassWeights& w) {
    if (kind == LossKind::weighted_ce) return weighted_cross_entropy(logits, labels, w.alpha);
    return multiclass_dice_loss(logits, labels);
}

inline std::size_t count_correct(const Tensor<float>& logits, const Tensor<float>& labels) {
    const std::size_t K = logits.channels(), pixels = logits.size() / K;
    std::size_t correct = 0;
    for (std::size_t px = 0; px < pixels; ++px) {
        const float* z = logits.data() + px * K;
        const float* y = labels.data() + px * K;
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (z[k] > z[best]) best = k;
        correct += y[best] == 1.0f ? 1 : 0;
    }
    return correct;
}

}  // namespace detail

struct ValidationResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Infer-mode loss and pixel accuracy over `samples`. Reads params only.
inline ValidationResult validate_model(const UNetParams<float>& params, const std::vector<Sample>& samples,
                                       std::size_t batch_size, LossKind loss, const ClassWeights& w) {
    ValidationResult r;
    std::size_t pixels = 0, correct = 0;
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < samples.size(); i += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t j = i; j < std::min(samples.size(), i + batch_size); ++j) idx.push_back(j);
        const Batch b = make_batch(samples, idx, params.config.num_classes);
        const Tensor<float> logits = infer_logits(params, b.images);
        const std::size_t px = logits.size() / logits.channels();
        loss_sum += detail::objective(logits, b.labels, loss, w).loss.value * static_cast<double>(px);
        correct += detail::count_correct(logits, b.labels);
        pixels += px;
    }
    r.loss = loss_sum / static_cast<double>(pixels);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(pixels);
    return r;
}

/// Full training state; everything except wall-clock time round-trips through a checkpoint.
class TrainingSession {
public:
    /// Fresh run: builds parameters from the seed.
    TrainingSession(const std::vector<Sample>& corpus, const UNetConfig& model, const TrainConfig& cfg,
                    const AugmentSpec& aug = {})
        : model_(model), cfg_(cfg), aug_(aug) {
        model_.validate();
        cfg_.validate();
        aug_.validate();
        data_ = detail::prepare_data(corpus, model_, cfg_, aug_, std::nullopt);
        Rng rng(mix_seed(cfg_.seed, 0x1a17));
        params_ = build<float>(model_, rng);
        best_ = params_;
        adam_ = AdamState<float>::zeros_like(params_);
        stopper_.patience = cfg_.patience;
    }

    /// Resumed run. Trajectory settings come from the checkpoint; `cfg` supplies
    /// run limits, and any trajectory drift is recorded as a warning.
    TrainingSession(const Checkpoint& ck, const std::vector<Sample>& corpus, const TrainConfig& cfg) : model_(ck.model) {
        const json& m = ck.meta;
        if (!m.contains("train") || !m.contains("epoch"))
            throw CheckpointError("checkpoint carries no training state; cannot resume");
        try {
            cfg_ = train_config_from_json(m.at("train"));
            aug_ = augment_spec_from_json(m.at("augment"));
        } catch (const ConfigError& e) {
            throw CheckpointError(std::string("checkpoint training state: ") + e.what());
        }
        const json requested = trajectory_json(cfg);
        const json& stored = m.at("train");
        for (const auto& [k, v] : requested.items())
            if (!stored.contains(k) || stored.at(k) != v)
                log_.warnings.push_back(k + " changed from " + (stored.contains(k) ? stored.at(k).dump() : "unset") +
                                        " to " + v.dump() + " on resume");
        if (!log_.warnings.empty()) cfg_ = cfg;
        cfg_.max_epochs = cfg.max_epochs;
        cfg_.target_accuracy = cfg.target_accuracy;
        cfg_.workers = cfg.workers;
        cfg_.validate();

        data_ = detail::prepare_data(corpus, model_, cfg_, aug_, checkpoint_means(ck));
        data_.weights = class_weights_from_json(m.at("class_weights"));
        if (data_.weights.alpha.size() != model_.num_classes)
            throw ConfigError("checkpoint class weights do not match num_classes");

        best_ = get_params(ck);
        params_ = get_params(ck, "train.");
        adam_ = get_adam(ck, params_);
        epoch_ = m.at("epoch").get<std::size_t>();
        stopper_.patience = cfg_.patience;
        stopper_.epochs_since_improvement = m.at("early_stop").at("since").get<std::size_t>();
        if (!m.at("early_stop").at("best").is_null()) stopper_.best_metric = m.at("early_stop").at("best").get<double>();
        log_.best_epoch = m.at("best_epoch").get<std::size_t>();
        for (const auto& r : m.at("history")) {
            EpochRecord e;
            e.epoch = r.at("epoch");
            e.train_loss = r.at("train_loss");
            e.train_acc = r.at("train_acc");
            e.val_loss = r.at("val_loss");
            e.val_acc = r.at("val_acc");
            log_.epochs.push_back(e);
        }
        if (log_.best_epoch > 0) log_.best_val_acc = stopper_.best_metric;
    }

    /// Runs epochs until max_epochs, early stop or target accuracy. When
    /// `checkpoint_path` is set the state is saved after every epoch.
    TrainResult run(const std::optional<std::filesystem::path>& checkpoint_path = std::nullopt) {
        if (stopper_.exhausted()) log_.stop_reason = "early_stop";
        while (log_.stop_reason.empty() && epoch_ < cfg_.max_epochs) {
            const EpochRecord rec = run_epoch();
            if (checkpoint_path) save_checkpoint(*checkpoint_path, checkpoint());
            if (stopper_.exhausted())
                log_.stop_reason = "early_stop";
            else if (cfg_.target_accuracy && rec.val_acc >= *cfg_.target_accuracy)
                log_.stop_reason = "target_accuracy";
        }
        if (log_.stop_reason.empty()) log_.stop_reason = "max_epochs";
        return {best_, log_, checkpoint()};
    }

    /// One pass over the training split, then validation.
    EpochRecord run_epoch() {
        const auto t0 = std::chrono::steady_clock::now();
        const auto adam_cfg = cfg_.adam();
        const auto groups = minibatch_indices(data_.train.size(), cfg_.batch_size, cfg_.seed, epoch_);
        double loss_sum = 0.0;
        std::size_t pixels = 0, correct = 0;
        for (std::size_t bi = 0; bi < groups.size(); ++bi) {
            const Batch b = make_batch(data_.train, groups[bi], model_.num_classes);
            Rng rng(mix_seed(cfg_.seed, epoch_ + 1, bi));
            const auto where = "epoch " + std::to_string(epoch_ + 1) + ", batch " + std::to_string(bi);
            ForwardResult<float> fwd;
            try {
                fwd = forward(params_, b.images, Mode::train, rng);
            } catch (const RejectedInput& e) {
                throw TrainingError(std::string("non-finite activations at ") + where + ": " + e.what());
            }
            auto obj = detail::objective(fwd.logits, b.labels, cfg_.loss, data_.weights);
            if (!std::isfinite(obj.loss.value)) throw TrainingError("non-finite loss at " + where);
            const auto grads = backward(params_, fwd.trace, obj.grad_logits);
            adam_step(adam_, params_, grads, adam_cfg);
            const std::size_t px = fwd.logits.size() / fwd.logits.channels();
            loss_sum += obj.loss.value * static_cast<double>(px);
            correct += detail::count_correct(fwd.logits, b.labels);
            pixels += px;
        }
        ++epoch_;

        ValidationResult val;
        try {
            val = validate_model(params_, data_.validation, cfg_.batch_size, cfg_.loss, data_.weights);
        } catch (const RejectedInput& e) {
            throw TrainingError("non-finite activations in validation after epoch " + std::to_string(epoch_) + ": " +
                                e.what());
        }
        if (!std::isfinite(val.loss))
            throw TrainingError("non-finite validation loss after epoch " + std::to_string(epoch_));
        EpochRecord rec;
        rec.epoch = epoch_;
        rec.train_loss = loss_sum / static_cast<double>(pixels);
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(pixels);
        rec.val_loss = val.loss;
        rec.val_acc = val.accuracy;
        if (stopper_.observe(val.accuracy)) {
            best_ = params_;
            log_.best_epoch = epoch_;
            log_.best_val_acc = val.accuracy;
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log_.epochs.push_back(rec);
        return rec;
    }

    Checkpoint checkpoint() const {
        Checkpoint ck;
        ck.model = model_;
        json history = json::array();
        for (const auto& r : log_.epochs) history.push_back(to_json(r, false));
        ck.meta = {{"epoch", epoch_},
                   {"train", trajectory_json(cfg_)},
                   {"augment", to_json(aug_)},
                   {"class_weights", to_json(data_.weights)},
                   {"frequency_source", "per-image-presence"},
                   {"norm_mean", data_.means},
                   {"early_stop",
                    {{"best", std::isfinite(stopper_.best_metric) ? json(stopper_.best_metric) : json(nullptr)},
                     {"since", stopper_.epochs_since_improvement}}},
                   {"best_epoch", log_.best_epoch},
                   {"history", history}};
        put_params(ck, best_);
        put_params(ck, params_, "train.");
        put_adam(ck, adam_);
        Tensor<float> mean_t({data_.means.size()});
        for (std::size_t i = 0; i < data_.means.size(); ++i) mean_t[i] = static_cast<float>(data_.means[i]);
        ck.put("norm.mean", mean_t);
        return ck;
    }

    const UNetParams<float>& params() const { return params_; }
    const UNetParams<float>& best_params() const { return best_; }
    const AdamState<float>& adam_state() const { return adam_; }
    const TrainLog& log() const { return log_; }
    const ClassWeights& class_weights_used() const { return data_.weights; }
    const std::vector<double>& channel_means_used() const { return data_.means; }
    const std::vector<Sample>& train_samples() const { return data_.train; }
    const std::vector<Sample>& validation_samples() const { return data_.validation; }
    std::size_t epochs_completed() const { return epoch_; }

private:
    UNetConfig model_;
    TrainConfig cfg_;
    AugmentSpec aug_;
    detail::PreparedData data_;
    UNetParams<float> params_;
    UNetParams<float> best_;
    AdamState<float> adam_;
    EarlyStopController stopper_;
    TrainLog log_;
    std::size_t epoch_ = 0;
};

inline TrainResult train(const std::vector<Sample>& corpus, const UNetConfig& model, const TrainConfig& cfg,
                         const AugmentSpec& aug = {},
                         const std::optional<std::filesystem::path>& checkpoint_path = std::nullopt) {
    TrainingSession s(corpus, model, cfg, aug);
    return s.run(checkpoint_path);
}

inline TrainResult resume(const Checkpoint& ck, const std::vector<Sample>& corpus, const TrainConfig& cfg,
                          const std::optional<std::filesystem::path>& checkpoint_path = std::nullopt) {
    TrainingSession s(ck, corpus, cfg);
    return s.run(checkpoint_path);
}

}  // namespace crackseg
