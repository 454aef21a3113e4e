// crackseg command-line tool: train, infer, eval, weights, compare.
//
// Exit codes: 0 ok, 2 configuration, 3 ingestion/evaluation, 4 training, 5 checkpoint.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crackseg.hpp"

namespace fs = std::filesystem;
using namespace crackseg;

namespace {

template <typename E>
json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw E(path.string() + ": cannot open");
    try {
        return json::parse(f);
    } catch (const json::parse_error& e) {
        throw E(path.string() + ": invalid JSON: " + e.what());
    }
}

void write_json_file(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IngestionError(path.string() + ": cannot open for writing");
    f << j.dump(2) << '\n';
}

fs::path resolve(const fs::path& base, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
}

// ------------------------------------------------------------------ train

struct TrainOptions {
    std::string config;
    std::string out;
    std::string resume;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::optional<std::size_t> max_epochs;
};

struct TrainFile {
    std::optional<UNetConfig> model;
    TrainConfig train;
    AugmentSpec augment;
    fs::path images;
    fs::path masks;
};

TrainFile parse_train_file(const fs::path& path) {
    const json j = read_json_file<ConfigError>(path);
    const fs::path base = path.parent_path();
    TrainFile tf;
    StrictObject<> root(j, "");
    if (root.has("model")) tf.model = unet_config_from_json(root.child("model"), "model");
    if (root.has("train")) tf.train = train_config_from_json(root.child("train"), "train");
    if (root.has("augment")) tf.augment = augment_spec_from_json(root.child("augment"), "augment");
    if (!root.has("data")) throw ConfigError("missing required field 'data'");
    StrictObject<> data(root.child("data"), "data");
    tf.images = resolve(base, data.require<std::string>("images"));
    tf.masks = resolve(base, data.require<std::string>("masks"));
    data.finish();
    root.finish();
    return tf;
}

int cmd_train(const TrainOptions& o) {
    TrainFile tf = parse_train_file(o.config);
    if (o.seed) tf.train.seed = *o.seed;
    if (o.workers) tf.train.workers = *o.workers;
    if (o.max_epochs) tf.train.max_epochs = *o.max_epochs;
    tf.train.validate();

    std::optional<Checkpoint> ck;
    if (!o.resume.empty()) {
        ck = load_checkpoint(o.resume);
        if (tf.model && !(*tf.model == ck->model))
            throw ConfigError("model configuration does not match checkpoint " + o.resume);
        tf.model = ck->model;
    }
    const UNetConfig model = tf.model.value_or(UNetConfig{});
    model.validate();
    tf.augment.validate();

    const auto corpus = load_corpus(tf.images, tf.masks, model.input_size, model.num_classes);
    fs::create_directories(o.out);
    const fs::path ck_path = fs::path(o.out) / "model.cseg";

    TrainResult r;
    if (ck) {
        TrainingSession s(*ck, corpus, tf.train);
        r = s.run(ck_path);
    } else {
        TrainingSession s(corpus, model, tf.train, tf.augment);
        r = s.run(ck_path);
    }
    write_trainlog_csv(fs::path(o.out) / "trainlog.csv", r.log);
    write_json_file(fs::path(o.out) / "summary.json", summary_json(r.log));
    for (const auto& w : r.log.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << "epochs " << r.log.epochs.size() << ", stop " << r.log.stop_reason << ", best epoch "
              << r.log.best_epoch << ", best val acc " << r.log.best_val_acc << '\n';
    return 0;
}

// ------------------------------------------------------------------ infer

struct InferOptions {
    std::string model;
    std::string input;
    std::string out;
    bool prob_maps = false;
    std::optional<std::size_t> crackmap_n;
};

int cmd_infer(const InferOptions& o) {
    const Checkpoint ck = load_checkpoint(o.model);
    UNetParams<float> params;
    std::vector<double> means;
    try {
        params = get_params(ck);
        means = checkpoint_means(ck);
    } catch (const Error& e) {
        throw CheckpointError(o.model + ": " + e.what());
    }
    const UNetConfig& cfg = params.config;
    if (cfg.input_channels != 3 || means.size() != cfg.input_channels)
        throw CheckpointError(o.model + ": model expects " + std::to_string(cfg.input_channels) +
                              "-channel input; images are RGB");

    const auto files = list_files(o.input, is_image_file);
    if (files.empty()) throw IngestionError(o.input + ": no images found");
    fs::create_directories(o.out);
    const auto& names = default_class_names();
    for (const auto& path : files) {
        const std::string stem = path.stem().string();
        const Tensor<float> img = normalized(standardize_image(read_rgb(path), cfg.input_size), means);
        const Tensor<float> probs = softmax_channels(infer_logits(params, img));
        const ClassMap cls = classify(probs);
        write_mask(fs::path(o.out) / (stem + ".png"), cls);
        const std::size_t K = probs.channels();
        if (o.prob_maps) {
            for (std::size_t k = 0; k < K; ++k) {
                FloatMap m{cls.width, cls.height, std::vector<float>(cls.size())};
                for (std::size_t i = 0; i < cls.size(); ++i) m.values[i] = probs[i * K + k];
                const std::string name = k < names.size() ? names[k] : "class" + std::to_string(k);
                write_pfm(fs::path(o.out) / (stem + "_prob_" + name + ".pfm"), m);
            }
        }
        if (o.crackmap_n) {
            const auto c = crack_indicator(cls);
            const auto pm = crack_probability_map(c, cls.width, cls.height, *o.crackmap_n);
            if (pm.degenerate) std::cerr << "warning: " << stem << ": every pixel is crack; map set to 1\n";
            FloatMap m{cls.width, cls.height, std::vector<float>(pm.values.begin(), pm.values.end())};
            write_pfm(fs::path(o.out) / (stem + "_crackmap.pfm"), m);
            std::vector<std::uint8_t> vis(pm.values.size());
            for (std::size_t i = 0; i < vis.size(); ++i)
                vis[i] = static_cast<std::uint8_t>(std::lround(std::clamp(pm.values[i], 0.0, 1.0) * 255.0));
            write_gray8(fs::path(o.out) / (stem + "_crackmap.png"), cls.width, cls.height, vis);
        }
    }
    std::cout << files.size() << " image(s) written to " << o.out << '\n';
    return 0;
}

// ------------------------------------------------------------------ eval

bool is_prediction_mask(const fs::path& p) {
    if (p.extension() != ".png") return false;
    const std::string s = p.stem().string();
    const std::string tail = "_crackmap";
    return !(s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0);
}

bool is_png(const fs::path& p) { return p.extension() == ".png"; }

std::map<std::string, fs::path> by_stem(const std::vector<fs::path>& files) {
    std::map<std::string, fs::path> out;
    for (const auto& f : files) out[f.stem().string()] = f;
    return out;
}

Prediction load_engine_prediction(const fs::path& dir, const std::string& id, std::size_t num_classes) {
    Prediction p;
    p.id = id;
    p.classes = read_mask(dir / (id + ".png"), num_classes);
    const fs::path score = dir / (id + "_prob_crack.pfm");
    if (fs::exists(score)) {
        const FloatMap m = read_pfm(score);
        if (m.width != p.classes.width || m.height != p.classes.height)
            throw EvaluationError(score.string() + ": size does not match " + id + ".png");
        p.crack_scores.assign(m.values.begin(), m.values.end());
    }
    return p;
}

Truth load_truth(const fs::path& dir, const std::string& id, const ClassMap& like, std::size_t num_classes) {
    const fs::path path = dir / (id + ".png");
    if (!fs::exists(path)) throw EvaluationError(path.string() + ": missing truth mask for '" + id + "'");
    LabelMask m = read_mask(path, num_classes);
    if (m.width != like.width || m.height != like.height) {
        if (like.width != like.height)
            throw EvaluationError(path.string() + ": size differs from non-square prediction '" + id + "'");
        m = standardize_mask(m, like.width);
    }
    return {id, std::move(m)};
}

struct EvalOptions {
    std::string pred;
    std::string truth;
    std::string report;
    std::string roc;
};

int cmd_eval(const EvalOptions& o) {
    constexpr std::size_t K = 3;
    const auto truth_files = by_stem(list_files(o.truth, is_png));
    if (truth_files.empty()) throw EvaluationError(o.truth + ": no truth masks found");
    const auto pred_files = by_stem(list_files(o.pred, is_prediction_mask));
    if (pred_files.empty()) throw EvaluationError(o.pred + ": no prediction masks found");
    for (const auto& [id, _] : truth_files)
        if (!pred_files.count(id)) throw EvaluationError(o.pred + ": no prediction for truth mask '" + id + "'");

    std::vector<Prediction> preds;
    std::vector<Truth> truths;
    for (const auto& [id, _] : pred_files) {
        if (!truth_files.count(id)) throw EvaluationError(o.truth + ": no truth mask for prediction '" + id + "'");
        preds.push_back(load_engine_prediction(o.pred, id, K));
        truths.push_back(load_truth(o.truth, id, preds.back().classes, K));
    }
    const EvalReport r = evaluate_corpus(preds, truths, K);
    write_json_file(o.report, to_json(r));
    if (!o.roc.empty()) {
        std::ofstream f(o.roc, std::ios::trunc);
        if (!f) throw IngestionError(o.roc + ": cannot open for writing");
        write_roc_csv(f, r.roc);
    }
    std::cout << "images " << r.per_image.size() << ", accuracy " << r.accuracy << ", auc ";
    if (r.auc)
        std::cout << *r.auc;
    else
        std::cout << "undefined";
    std::cout << '\n';
    return 0;
}

// ------------------------------------------------------------------ weights

struct WeightsOptions {
    std::string masks;
    std::string scheme = "median";
    std::string out;
};

int cmd_weights(const WeightsOptions& o) {
    constexpr std::size_t K = 3;
    const WeightScheme scheme = parse_weight_scheme(o.scheme);
    const auto files = list_files(o.masks, is_png);
    if (files.empty()) throw IngestionError(o.masks + ": no masks found");
    PixelStats st;
    st.counts.assign(K, 0);
    st.presence_totals.assign(K, 0);
    for (const auto& f : files) accumulate_stats(st, read_mask(f, K), K);
    const ClassWeights w = class_weights(st.counts, st.presence_totals, scheme);
    json classes = json::array();
    for (std::size_t k = 0; k < K; ++k)
        classes.push_back({{"class", class_name(k)},
                           {"pixels", w.pixel_counts[k]},
                           {"frequency", w.frequencies[k]},
                           {"alpha", w.alpha[k]}});
    const json j{{"scheme", to_string(scheme)},
                 {"frequency_definition", "class pixels / pixels of images containing the class"},
                 {"masks", files.size()},
                 {"alpha", w.alpha},
                 {"classes", classes}};
    if (o.out.empty())
        std::cout << j.dump(2) << '\n';
    else
        write_json_file(o.out, j);
    return 0;
}

// ------------------------------------------------------------------ compare

struct ManifestMask {
    fs::path path;
    double score = 0.0;
    std::string class_hint;
};

struct ManifestImage {
    std::string id;
    std::vector<ManifestMask> masks;
};

struct Manifest {
    std::string source;
    std::vector<ManifestImage> images;
};

Manifest parse_manifest(const fs::path& path) {
    const json j = read_json_file<IngestionError>(path);
    const fs::path base = path.parent_path();
    Manifest m;
    StrictObject<IngestionError> root(j, "");
    m.source = root.require<std::string>("source");
    if (!root.has("images")) throw IngestionError("missing required field 'images'");
    const json& images = root.child("images");
    if (!images.is_array()) throw IngestionError("invalid value for 'images': expected an array");
    if (root.has("errors")) {
        json errs;
        root.read("errors", errs);
        if (!errs.is_array()) throw IngestionError("invalid value for 'errors': expected an array");
    }
    if (root.has("checkpoint")) root.require<std::string>("checkpoint");
    root.finish();
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::string ip = "images[" + std::to_string(i) + "]";
        StrictObject<IngestionError> io(images[i], ip);
        ManifestImage im;
        im.id = io.require<std::string>("id");
        if (!io.has("masks")) throw IngestionError("missing required field '" + ip + ".masks'");
        const json& masks = io.child("masks");
        if (!masks.is_array()) throw IngestionError("invalid value for '" + ip + ".masks': expected an array");
        io.finish();
        for (std::size_t k = 0; k < masks.size(); ++k) {
            const std::string mp = ip + ".masks[" + std::to_string(k) + "]";
            StrictObject<IngestionError> mo(masks[k], mp);
            ManifestMask mm;
            mm.path = resolve(base, mo.require<std::string>("path"));
            mm.score = mo.require<double>("score");
            mm.class_hint = mo.require<std::string>("class_hint");
            if (mo.has("bbox")) {
                const auto bbox = mo.require<std::vector<double>>("bbox");
                if (bbox.size() != 4) throw IngestionError("invalid value for '" + mp + ".bbox': expected 4 numbers");
            }
            mo.finish();
            if (!fs::exists(mm.path)) throw IngestionError(mp + ".path: file not found: " + mm.path.string());
            im.masks.push_back(std::move(mm));
        }
        m.images.push_back(std::move(im));
    }
    return m;
}

enum class SelectRule { highest_score, union_all };

Prediction external_prediction(const ManifestImage& im, SelectRule rule, std::size_t width, std::size_t height) {
    Prediction p;
    p.id = im.id;
    p.classes = ClassMap(width, height);
    std::vector<const ManifestMask*> chosen;
    if (rule == SelectRule::highest_score) {
        const ManifestMask* best = nullptr;
        for (const auto& m : im.masks)
            if (!best || m.score > best->score) best = &m;
        if (best) chosen.push_back(best);
    } else {
        for (const auto& m : im.masks) chosen.push_back(&m);
    }
    for (const auto* m : chosen) {
        LabelMask raw = read_gray8(m->path);
        if (raw.width != width || raw.height != height) {
            if (width != height)
                throw EvaluationError(m->path.string() + ": size differs from non-square reference");
            raw = standardize_mask(raw, width);
        }
        for (std::size_t i = 0; i < raw.size(); ++i)
            if (raw.classes[i] != 0) p.classes.classes[i] = kCrack;
    }
    return p;
}

json metrics_json(const ImageEval& e) {
    return {{"auc", e.auc ? json(*e.auc) : json(nullptr)},
            {"accuracy", e.accuracy},
            {"dice", {{"background", e.dice.at(0)}, {"crack", e.dice.at(1)}, {"delamination", e.dice.at(2)}}}};
}

json delta_json(const std::optional<double>& ae, const std::optional<double>& ax, double acc_e, double acc_x,
                const std::vector<double>& de, const std::vector<double>& dx) {
    json d{{"auc", ae && ax ? json(*ax - *ae) : json(nullptr)}, {"accuracy", acc_x - acc_e}};
    d["dice"] = {{"background", dx.at(0) - de.at(0)}, {"crack", dx.at(1) - de.at(1)}, {"delamination", dx.at(2) - de.at(2)}};
    return d;
}

struct CompareOptions {
    std::string engine_pred;
    std::string external;
    std::string truth;
    std::string report;
    std::string select = "highest-score";
};

int cmd_compare(const CompareOptions& o) {
    constexpr std::size_t K = 3;
    SelectRule rule;
    if (o.select == "highest-score")
        rule = SelectRule::highest_score;
    else if (o.select == "union")
        rule = SelectRule::union_all;
    else
        throw ConfigError("unknown --select rule '" + o.select + "' (expected highest-score or union)");

    const Manifest man = parse_manifest(o.external);
    if (man.images.empty()) throw EvaluationError(o.external + ": manifest lists no images");
    std::vector<Prediction> engine, external;
    std::vector<Truth> truth_e, truth_x;
    for (const auto& im : man.images) {
        const fs::path ep = fs::path(o.engine_pred) / (im.id + ".png");
        if (!fs::exists(ep)) throw EvaluationError(ep.string() + ": missing engine prediction for '" + im.id + "'");
        engine.push_back(load_engine_prediction(o.engine_pred, im.id, K));
        truth_e.push_back(load_truth(o.truth, im.id, engine.back().classes, K));
        const auto& t = truth_e.back().mask;
        external.push_back(external_prediction(im, rule, t.width, t.height));
        truth_x.push_back(truth_e.back());
    }
    const EvalReport re = evaluate_corpus(engine, truth_e, K);
    const EvalReport rx = evaluate_corpus(external, truth_x, K);

    json per_image = json::array();
    for (std::size_t i = 0; i < re.per_image.size(); ++i) {
        const auto& e = re.per_image[i];
        const auto& x = rx.per_image[i];
        per_image.push_back({{"id", e.id},
                             {"engine", metrics_json(e)},
                             {"external", metrics_json(x)},
                             {"delta", delta_json(e.auc, x.auc, e.accuracy, x.accuracy, e.dice, x.dice)}});
    }
    const json report{{"external_source", man.source},
                      {"select", o.select},
                      {"delta_convention", "external - engine"},
                      {"engine", to_json(re)},
                      {"external", to_json(rx)},
                      {"per_image", per_image},
                      {"aggregate_delta", delta_json(re.auc, rx.auc, re.accuracy, rx.accuracy, re.dice, rx.dice)}};
    write_json_file(o.report, report);
    std::cout << "images " << re.per_image.size() << ", accuracy engine " << re.accuracy << " external "
              << rx.accuracy << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Crack segmentation: train, infer, evaluate, class weights, external comparison"};
    app.require_subcommand(1);

    TrainOptions to;
    auto* train = app.add_subcommand("train", "Train a model from a JSON config; writes model.cseg, trainlog.csv, summary.json");
    train->add_option("--config", to.config,
                      "JSON config with sections model, train, augment, data{images, masks}. Unknown keys are rejected.\n"
                      "model defaults: input_size 256, input_channels 3, num_classes 3, base_filters 64, depth 4,\n"
                      "  dropout_rate 0.5, dropout_stages [encoder-<depth>, bridge]\n"
                      "train defaults: max_epochs 30, batch_size 32, eta 1e-4, constant_eta false, beta1 0.9,\n"
                      "  beta2 0.999, lambda 1, epsilon 1e-8, loss weighted-ce|dice, weight_scheme median|invmax,\n"
                      "  patience 10, seed 0, split_fraction 0.8, target_accuracy (unset), workers 1\n"
                      "augment defaults: rotation_deg 30, shear_deg 15, reflect_horizontal true,\n"
                      "  reflect_vertical true, multiplier 2")
        ->required()
        ->check(CLI::ExistingFile);
    train->add_option("--out", to.out, "Output directory")->required();
    train->add_option("--resume", to.resume, "Continue from a checkpoint written by an earlier run");
    train->add_option("--seed", to.seed, "Override train.seed");
    train->add_option("--workers", to.workers, "Override train.workers (1 is always bitwise deterministic)");
    train->add_option("--max-epochs", to.max_epochs, "Override train.max_epochs");

    InferOptions io;
    auto* infer = app.add_subcommand("infer", "Predict class masks for every image in a directory");
    infer->add_option("--model", io.model, "Checkpoint (.cseg)")->required();
    infer->add_option("--input", io.input, "Image directory")->required();
    infer->add_option("--out", io.out, "Output directory")->required();
    infer->add_flag("--prob-maps", io.prob_maps, "Also write <stem>_prob_<class>.pfm softmax maps");
    infer->add_option("--crackmap-n", io.crackmap_n, "Also write the crack probability map with window radius N");

    EvalOptions eo;
    auto* eval = app.add_subcommand("eval", "Score predicted masks against truth masks");
    eval->add_option("--pred", eo.pred, "Prediction directory (<stem>.png, optional <stem>_prob_crack.pfm)")->required();
    eval->add_option("--truth", eo.truth, "Truth mask directory (<stem>.png)")->required();
    eval->add_option("--report", eo.report, "JSON report path")->required();
    eval->add_option("--roc", eo.roc, "ROC curve CSV path");

    WeightsOptions wo;
    auto* weights = app.add_subcommand("weights", "Class pixel counts, frequencies and loss weights of a mask corpus");
    weights->add_option("--masks", wo.masks, "Mask directory")->required();
    weights->add_option("--scheme", wo.scheme, "median or invmax")->capture_default_str();
    weights->add_option("--out", wo.out, "JSON output path (default: standard output)");

    CompareOptions co;
    auto* compare = app.add_subcommand("compare", "Side-by-side evaluation of engine masks and an external mask manifest");
    compare->add_option("--engine-pred", co.engine_pred, "Engine prediction directory")->required();
    compare->add_option("--external", co.external, "External manifest JSON")->required();
    compare->add_option("--truth", co.truth, "Truth mask directory")->required();
    compare->add_option("--report", co.report, "JSON report path")->required();
    compare->add_option("--select", co.select, "highest-score or union")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*train) return cmd_train(to);
        if (*infer) return cmd_infer(io);
        if (*eval) return cmd_eval(eo);
        if (*weights) return cmd_weights(wo);
        if (*compare) return cmd_compare(co);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
