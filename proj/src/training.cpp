#include "cmc/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cmc/evaluation.hpp"
#include "cmc/io.hpp"
#include "cmc/parallel.hpp"

namespace cmc::training {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string to_string(Task t) { return t == Task::seg ? "seg" : "clf"; }

TrainConfig TrainConfig::defaults(Task task) {
    TrainConfig c;
    c.task = task;
    if (task == Task::seg) {
        c.batch_size = 8;
        c.base_lr = 1e-3;
        c.weight_decay = 0.0;
        c.optimizer = optim::Kind::sgd;
    } else {
        c.batch_size = 4;
        c.base_lr = 1e-4;
        c.weight_decay = 1e-5;
        c.optimizer = optim::Kind::adam;
    }
    return c;
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(base_lr >= 0.0)) throw ValidationError("base_lr must be >= 0");
    if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
    if (!(grad_clip >= 0.0)) throw ValidationError("grad_clip must be >= 0");
    double prev = 0.0;
    for (double m : milestones) {
        if (!(m > prev && m < 1.0)) throw ValidationError("milestones must be strictly increasing in (0,1)");
        prev = m;
    }
}

json TrainConfig::to_json() const {
    return {{"task", to_string(task)},       {"epochs", epochs},         {"batch_size", batch_size},
            {"base_lr", base_lr},            {"weight_decay", weight_decay}, {"optimizer", optim::to_string(optimizer)},
            {"momentum", momentum},          {"milestones", milestones}, {"grad_clip", grad_clip},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    const Task task = j.at("task").get<std::string>() == "seg" ? Task::seg : Task::clf;
    TrainConfig c = defaults(task);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.optimizer = optim::kind_from_string(j.value("optimizer", optim::to_string(c.optimizer)));
    c.momentum = j.value("momentum", c.momentum);
    c.milestones = j.value("milestones", c.milestones);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

double lr_schedule(int epoch, const TrainConfig& cfg) {
    if (epoch < 0 || epoch >= cfg.epochs) {
        throw ValidationError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
    }
    double lr = cfg.base_lr;
    // A milestone never lands on epoch 0, so very short runs start at base_lr.
    for (double m : cfg.milestones)
        if (epoch >= std::max<long long>(1, std::llround(m * cfg.epochs))) lr /= 10.0;
    return lr;
}

// ---------------------------------------------------------------- checkpoints

std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

void restore_rng(std::mt19937_64& rng, const std::string& state) {
    std::istringstream is(state);
    is >> rng;
    if (!is) throw ValidationError("malformed rng state in checkpoint");
}

namespace {

fs::path with_suffix(const fs::path& stem, const std::string& suffix) { return fs::path(stem.string() + suffix); }

void write_floats(const fs::path& path, std::span<const float> values) {
    const auto bytes = io::floats_to_le_bytes(values);
    io::write_file_atomic(path, bytes);
}

std::vector<float> read_floats(const fs::path& path) {
    if (!fs::exists(path)) throw ValidationError("missing file: " + path.string());
    const auto bytes = io::read_file(path);
    if (bytes.size() % 4 != 0) throw ValidationError("payload size mismatch in " + path.string());
    return io::le_bytes_to_floats(bytes);
}

}  // namespace

void save_checkpoint(const fs::path& stem, nn::Module& model, const optim::Optimizer* opt, const json& meta) {
    if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
    const auto state = nn::flatten_state(model);
    write_floats(with_suffix(stem, ".bin"), state);
    json m = meta;
    m["num_values"] = state.size();
    if (opt) {
        const auto os = opt->state();
        write_floats(with_suffix(stem, ".opt.bin"), os);
        m["optimizer_steps"] = opt->steps();
    }
    // The sidecar goes last so a complete .json implies complete blobs.
    io::write_text_atomic(with_suffix(stem, ".json"), m.dump(2) + "\n");
}

json read_checkpoint_meta(const fs::path& stem) {
    const fs::path p = with_suffix(stem, ".json");
    if (!fs::exists(p)) throw ValidationError("missing checkpoint: " + p.string());
    try {
        return json::parse(io::read_text(p));
    } catch (const json::exception& e) {
        throw ValidationError("malformed checkpoint metadata " + p.string() + ": " + e.what());
    }
}

json load_checkpoint(const fs::path& stem, nn::Module& model, optim::Optimizer* opt) {
    json meta = read_checkpoint_meta(stem);
    const auto state = read_floats(with_suffix(stem, ".bin"));
    nn::load_state(model, state);
    if (opt) opt->load_state(read_floats(with_suffix(stem, ".opt.bin")), meta.value("optimizer_steps", std::int64_t{0}));
    return meta;
}

namespace {

void append_line(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + path.string());
    out << j.dump() << "\n";
}

/// Rewrites the log with only the records kept after a resume.
void rewrite_log(const fs::path& path, const json& history) {
    std::string text;
    for (const auto& h : history) text += h.dump() + "\n";
    io::write_text_atomic(path, text);
}

void clip_gradients(const std::vector<nn::Param*>& params, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (auto* p : params)
        for (float g : p->grad.storage()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto* p : params)
        for (float& g : p->grad.storage()) g *= scale;
}

optim::Settings optimizer_settings(const TrainConfig& t) {
    optim::Settings s;
    s.kind = t.optimizer;
    s.weight_decay = t.weight_decay;
    s.momentum = t.momentum;
    return s;
}

void require_finite(const Tensor& t, const std::string& what, int epoch) {
    for (float v : t.values())
        if (!std::isfinite(v)) throw NonFiniteLoss("non-finite " + what + " at epoch " + std::to_string(epoch));
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

}  // namespace

// ---------------------------------------------------------------- segmentation

SliceSet make_slice_set(const std::vector<const dataset::Scan*>& scans, volumes::MaskKind stage, std::int64_t size,
                        int max_per_scan) {
    if (size < 1) throw ValidationError("slice size must be >= 1");
    std::vector<float> images, targets;
    std::int64_t n = 0;
    const std::int64_t plane = size * size;
    for (const auto* s : scans) {
        const auto d = s->volume.dims();
        const volumes::Dims target{d[0], size, size};
        const auto vol = volumes::resample_volume(s->volume, target);
        const auto lung = volumes::resample_mask(s->lung, target);
        const auto inf = volumes::resample_mask(s->infection, target);
        std::vector<std::int64_t> picks(static_cast<std::size_t>(d[0]));
        std::iota(picks.begin(), picks.end(), std::int64_t{0});
        if (max_per_scan > 0 && max_per_scan < d[0]) {
            picks.clear();
            for (int k = 0; k < max_per_scan; ++k) {
                picks.push_back(static_cast<std::int64_t>((static_cast<double>(k) + 0.5) * static_cast<double>(d[0]) /
                                                          max_per_scan));
            }
        }
        for (auto t : picks) {
            for (std::int64_t i = 0; i < plane; ++i) {
                const auto u = static_cast<std::size_t>(t * plane + i);
                const float x = vol.data[t * plane + i];
                if (stage == volumes::MaskKind::lung) {
                    images.push_back(x);
                    targets.push_back(lung.data[u]);
                } else {
                    images.push_back(x * lung.data[u]);
                    targets.push_back(inf.data[u]);
                }
            }
            ++n;
        }
    }
    SliceSet set;
    set.images = Tensor({n, 1, 1, size, size}, std::move(images));
    set.targets = Tensor({n, 1, 1, size, size}, std::move(targets));
    return set;
}

json SegEpochRecord::to_json() const {
    return {{"epoch", epoch},       {"lr", lr},         {"train_loss", train_loss},
            {"val_miou", val_miou}, {"val_iou", val_iou}, {"seconds", seconds}};
}

segmentation::OverlapCounts evaluate_slices(segmentation::SegModel& model, const SliceSet& set, double threshold,
                                            int batch) {
    segmentation::OverlapCounts counts;
    const std::int64_t n = set.size();
    if (n == 0) return counts;
    const std::int64_t plane = set.images.numel() / n;
    std::vector<std::uint8_t> pred, gt;
    for (std::int64_t b0 = 0; b0 < n; b0 += batch) {
        const std::int64_t b1 = std::min<std::int64_t>(n, b0 + batch);
        const Tensor p = model.predict(set.images.slice_rows(b0, b1));
        pred.resize(static_cast<std::size_t>(p.numel()));
        gt.resize(pred.size());
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            pred[static_cast<std::size_t>(i)] = p[i] > threshold ? 1 : 0;
            gt[static_cast<std::size_t>(i)] = set.targets[b0 * plane + i] > 0.5f ? 1 : 0;
        }
        counts.add(pred, gt);
    }
    return counts;
}

SegTrainResult train_segmentation(segmentation::SegModel& model, const SliceSet& train, const SliceSet& val,
                                  const SegTrainSettings& settings,
                                  const std::function<void(const SegEpochRecord&)>& on_epoch) {
    const TrainConfig& tc = settings.train;
    tc.validate();
    if (train.size() == 0) throw ValidationError("train_segmentation: empty training split");
    if (val.size() == 0) throw ValidationError("train_segmentation: empty validation split");
    require_same_shape(train.images, train.targets, "train_segmentation");

    auto params = nn::parameters_of(model);
    optim::Optimizer opt(params, optimizer_settings(tc));
    std::mt19937_64 rng(tc.seed);
    SegTrainResult result;
    std::vector<float> best_state = nn::flatten_state(model);
    int start_epoch = 0;

    const bool files = !settings.out_dir.empty();
    const fs::path log_path = settings.out_dir / "metrics.jsonl";
    auto meta_base = [&]() {
        return json{{"kind", "seg"},
                    {"stage", volumes::to_string(settings.stage)},
                    {"model", model.config().to_json()},
                    {"train", tc.to_json()},
                    {"threshold", settings.threshold},
                    {"slice_size", train.images.dim(4)}};
    };
    if (files) fs::create_directories(settings.out_dir);
    if (files && settings.resume && fs::exists(with_suffix(settings.out_dir / "last", ".json"))) {
        const json meta = load_checkpoint(settings.out_dir / "last", model, &opt);
        restore_rng(rng, meta.at("rng").get<std::string>());
        start_epoch = meta.at("epoch").get<int>() + 1;
        result.best_epoch = meta.at("best_epoch").get<int>();
        result.best_miou = meta.at("best_metric").get<double>();
        result.best_iou = meta.value("best_iou", 0.0);
        for (const auto& h : meta.at("history")) {
            SegEpochRecord r;
            r.epoch = h.at("epoch");
            r.lr = h.at("lr");
            r.train_loss = h.at("train_loss");
            r.val_miou = h.at("val_miou");
            r.val_iou = h.at("val_iou");
            r.seconds = h.at("seconds");
            result.history.push_back(r);
        }
        rewrite_log(log_path, meta.at("history"));
        auto best = segmentation::make_seg_model(model.config());
        load_checkpoint(settings.out_dir / "best", *best);
        best_state = nn::flatten_state(*best);
    } else if (files) {
        io::write_text_atomic(log_path, "");
    }

    const std::int64_t n = train.size();
    const std::int64_t S = train.images.dim(3), Wd = train.images.dim(4);
    const std::int64_t plane = S * Wd;
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));

    for (int epoch = start_epoch; epoch < tc.epochs; ++epoch) {
        const auto t0 = Clock::now();
        const double lr = lr_schedule(epoch, tc);
        std::iota(order.begin(), order.end(), std::int64_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::int64_t b0 = 0; b0 < n; b0 += tc.batch_size) {
            const std::int64_t b = std::min<std::int64_t>(tc.batch_size, n - b0);
            Tensor x({b, 1, 1, S, Wd}), y({b, 1, 1, S, Wd});
            std::vector<std::uint64_t> seeds(static_cast<std::size_t>(b));
            for (auto& s : seeds) s = rng();
            CMC_OMP_PRAGMA("omp parallel for schedule(static)")
            for (std::int64_t k = 0; k < b; ++k) {
                const std::int64_t src = order[static_cast<std::size_t>(b0 + k)];
                Tensor img({S, Wd}, std::vector<float>(train.images.data() + src * plane,
                                                       train.images.data() + (src + 1) * plane));
                Tensor tgt({S, Wd}, std::vector<float>(train.targets.data() + src * plane,
                                                       train.targets.data() + (src + 1) * plane));
                if (settings.use_augmentation) {
                    std::mt19937_64 r(seeds[static_cast<std::size_t>(k)]);
                    Tensor* masks[] = {&tgt};
                    segmentation::augment_slice(img, masks, settings.augment, r);
                }
                std::copy_n(img.data(), plane, x.data() + k * plane);
                std::copy_n(tgt.data(), plane, y.data() + k * plane);
            }
            opt.zero_grad();
            Tensor logits = model.forward(x, nn::Phase::train);
            require_finite(logits, "segmentation output", epoch);
            Matrix prob(b, plane), target = to_matrix(y);
            for (std::int64_t i = 0; i < logits.numel(); ++i) prob.v[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
            const auto dice = segmentation::dice_loss(prob, target);
            if (!std::isfinite(dice.value)) {
                throw NonFiniteLoss("non-finite segmentation loss at epoch " + std::to_string(epoch));
            }
            Tensor dlogits(logits.shape());
            for (std::int64_t i = 0; i < logits.numel(); ++i) {
                const double p = prob.v[static_cast<std::size_t>(i)];
                dlogits[i] = static_cast<float>(dice.grad.v[static_cast<std::size_t>(i)] * p * (1.0 - p));
            }
            model.backward(dlogits);
            clip_gradients(params, tc.grad_clip);
            opt.step(lr);
            result.step_losses.push_back(dice.value);
            loss_sum += dice.value;
            ++batches;
        }

        const auto counts = evaluate_slices(model, val, settings.threshold);
        SegEpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / std::max(1, batches);
        rec.val_miou = counts.miou();
        rec.val_iou = counts.iou();
        rec.seconds = seconds_since(t0);
        result.history.push_back(rec);
        if (rec.val_miou > result.best_miou) {
            result.best_miou = rec.val_miou;
            result.best_iou = rec.val_iou;
            result.best_epoch = epoch;
            best_state = nn::flatten_state(model);
            if (files) {
                json meta = meta_base();
                meta["epoch"] = epoch;
                meta["best_metric"] = rec.val_miou;
                meta["best_iou"] = rec.val_iou;
                save_checkpoint(settings.out_dir / "best", model, nullptr, meta);
            }
        }
        if (files) {
            append_line(log_path, rec.to_json());
            json meta = meta_base();
            meta["epoch"] = epoch;
            meta["best_epoch"] = result.best_epoch;
            meta["best_metric"] = result.best_miou;
            meta["best_iou"] = result.best_iou;
            meta["rng"] = rng_state(rng);
            json hist = json::array();
            for (const auto& h : result.history) hist.push_back(h.to_json());
            meta["history"] = hist;
            save_checkpoint(settings.out_dir / "last", model, &opt, meta);
        }
        if (on_epoch) on_epoch(rec);
    }
    nn::load_state(model, best_state);
    return result;
}

// ---------------------------------------------------------------- classification

std::string to_string(Mode m) {
    switch (m) {
        case Mode::plain: return "plain";
        case Mode::lung_aware: return "lung_aware";
        case Mode::infection_aware: return "infection_aware";
    }
    return "?";
}

Mode mode_from_string(const std::string& s) {
    if (s == "plain") return Mode::plain;
    if (s == "lung_aware") return Mode::lung_aware;
    if (s == "infection_aware") return Mode::infection_aware;
    throw ValidationError("unknown mode '" + s + "' (expected plain, lung_aware or infection_aware)");
}

std::int64_t input_channels(Mode m) { return m == Mode::plain ? 1 : 2; }

Tensor make_input(const dataset::Scan& scan, Mode mode, const volumes::Dims& dims) {
    const bool same = scan.volume.dims() == dims;
    const volumes::CTVolume vol = same ? scan.volume : volumes::resample_volume(scan.volume, dims);
    const std::int64_t n = volumes::voxel_count(dims);
    if (mode == Mode::plain) return vol.data.reshaped({1, dims[0], dims[1], dims[2]});
    const volumes::MaskVolume& raw = mode == Mode::lung_aware ? scan.lung : scan.infection;
    volumes::require_aligned(scan.volume, raw);
    const volumes::MaskVolume mask = same ? raw : volumes::resample_mask(raw, dims);
    Tensor out({2, dims[0], dims[1], dims[2]});
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = mask.data[static_cast<std::size_t>(i)];
        out[n + i] = vol.data[i];
    }
    return out;
}

ScanInputs prepare_inputs(const std::vector<const dataset::Scan*>& scans, Mode mode, const volumes::Dims& dims) {
    ScanInputs in;
    in.inputs.resize(scans.size());
    const auto n = static_cast<std::int64_t>(scans.size());
    std::vector<std::string> errors(scans.size());
    CMC_OMP_PRAGMA("omp parallel for schedule(dynamic)")
    for (std::int64_t k = 0; k < n; ++k) {
        try {
            in.inputs[static_cast<std::size_t>(k)] = make_input(*scans[static_cast<std::size_t>(k)], mode, dims);
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(k)] = e.what();
        }
    }
    for (const auto& e : errors)
        if (!e.empty()) throw ValidationError(e);
    for (const auto* s : scans) {
        in.labels.push_back(s->label.index());
        in.ids.push_back(s->id);
    }
    return in;
}

json ClfEpochRecord::to_json() const {
    json j = {{"epoch", epoch},   {"lr", lr},         {"train_loss", train_loss}, {"val_macro_f1", val_macro_f1},
              {"sigma1", sigma1}, {"sigma2", sigma2}, {"seconds", seconds}};
    if (train_macro_f1 >= 0.0) j["train_macro_f1"] = train_macro_f1;
    return j;
}

double sample_beta(double a, std::mt19937_64& rng) {
    if (!(a > 0.0)) throw ValidationError("mixup_alpha must be > 0");
    std::gamma_distribution<double> g(a, 1.0);
    const double x = g(rng), y = g(rng);
    if (x + y <= 0.0) return 0.5;
    return x / (x + y);
}

Predictions predict(classifier::CMCModel& model, const std::vector<Tensor>& inputs, int batch) {
    Predictions p;
    const auto n = static_cast<std::int64_t>(inputs.size());
    for (std::int64_t b0 = 0; b0 < n; b0 += batch) {
        const std::int64_t b1 = std::min<std::int64_t>(n, b0 + batch);
        const Tensor x = stack(std::span<const Tensor>(inputs.data() + b0, static_cast<std::size_t>(b1 - b0)));
        const Matrix prob = losses::softmax(to_matrix(model.forward(x, nn::Phase::eval)));
        for (std::int64_t i = 0; i < prob.rows; ++i) {
            evaluation::Probs pr{};
            for (int c = 0; c < volumes::kNumClasses; ++c) pr[static_cast<std::size_t>(c)] = prob(i, c);
            p.probs.push_back(pr);
            p.labels.push_back(evaluation::argmax(pr));
        }
    }
    return p;
}

namespace {

/// Holds (log sigma1, log sigma2) as trainable parameters.
class SigmaParams : public nn::Module {
public:
    explicit SigmaParams(double init) {
        for (auto* p : {&s1_, &s2_}) {
            p->value = Tensor({1}, static_cast<float>(init));
            p->grad = Tensor({1});
            p->decay = false;
        }
        s1_.name = "log_sigma1";
        s2_.name = "log_sigma2";
    }
    Tensor forward(const Tensor& x, nn::Phase) override { return x; }
    Tensor backward(const Tensor& dy) override { return dy; }
    void parameters(std::vector<nn::Param*>& out) override {
        out.push_back(&s1_);
        out.push_back(&s2_);
    }
    losses::AdaptiveWeights weights() const { return {s1_.value[0], s2_.value[0]}; }
    void set_grad(double g1, double g2) {
        s1_.grad[0] = static_cast<float>(g1);
        s2_.grad[0] = static_cast<float>(g2);
    }
    void set(double l1, double l2) {
        s1_.value[0] = static_cast<float>(l1);
        s2_.value[0] = static_cast<float>(l2);
    }

private:
    nn::Param s1_, s2_;
};

double score(classifier::CMCModel& model, const ScanInputs& data, int batch) {
    const auto p = predict(model, data.inputs, batch);
    return evaluation::macro_f1(evaluation::ConfusionMatrix::from(data.labels, p.labels));
}

}  // namespace

ClfTrainResult train_classifier(classifier::CMCModel& model, const ScanInputs& train, const ScanInputs& val,
                                const ClfTrainSettings& settings,
                                const std::function<void(const ClfEpochRecord&)>& on_epoch) {
    const TrainConfig& tc = settings.train;
    tc.validate();
    if (train.inputs.empty()) throw ValidationError("train_classifier: empty training split");
    if (val.inputs.empty()) throw ValidationError("train_classifier: empty validation split");
    if (model.config().in_channels != input_channels(settings.mode)) {
        throw ValidationError("mode " + to_string(settings.mode) + " needs in_channels=" +
                              std::to_string(input_channels(settings.mode)) + ", model has " +
                              std::to_string(model.config().in_channels));
    }
    for (const auto* set : {&train, &val})
        for (const auto& x : set->inputs) model.check_input(Shape{1, x.dim(0), x.dim(1), x.dim(2), x.dim(3)});
    if (settings.use_contrastive && !(settings.contrastive.temperature > 0.0)) {
        throw ValidationError("temperature must be > 0");
    }
    if (settings.use_mixup && !(settings.mixup_alpha > 0.0)) throw ValidationError("mixup_alpha must be > 0");

    std::array<std::int64_t, volumes::kNumClasses> counts{};
    if (settings.class_counts) {
        counts = *settings.class_counts;
    } else {
        for (int y : train.labels) ++counts[static_cast<std::size_t>(y)];
    }
    const auto alpha = losses::class_weights_from_counts(counts);

    SigmaParams sigma(settings.init_log_sigma);
    auto params = nn::parameters_of(model);
    sigma.parameters(params);
    optim::Optimizer opt(params, optimizer_settings(tc));
    std::mt19937_64 rng(tc.seed);
    ClfTrainResult result;
    std::vector<float> best_state = nn::flatten_state(model);
    losses::AdaptiveWeights best_sigma = sigma.weights();
    int start_epoch = 0;

    const bool files = !settings.out_dir.empty();
    const fs::path log_path = settings.out_dir / "metrics.jsonl";
    auto meta_base = [&]() {
        const auto w = sigma.weights();
        return json{{"kind", "clf"},
                    {"mode", to_string(settings.mode)},
                    {"input_dims", settings.input_dims},
                    {"model", model.config().to_json()},
                    {"train", tc.to_json()},
                    {"use_contrastive", settings.use_contrastive},
                    {"use_mixup", settings.use_mixup},
                    {"temperature", settings.contrastive.temperature},
                    {"normalize_projections", settings.contrastive.normalize},
                    {"mixup_alpha", settings.mixup_alpha},
                    {"class_weights", alpha.alpha},
                    {"log_sigma1", w.log_sigma1},
                    {"log_sigma2", w.log_sigma2}};
    };
    if (files) fs::create_directories(settings.out_dir);
    if (files && settings.resume && fs::exists(with_suffix(settings.out_dir / "last", ".json"))) {
        // The optimizer state covers the model followed by the two sigma scalars.
        const json meta = read_checkpoint_meta(settings.out_dir / "last");
        load_checkpoint(settings.out_dir / "last", model);
        opt.load_state(read_floats(with_suffix(settings.out_dir / "last", ".opt.bin")),
                       meta.value("optimizer_steps", std::int64_t{0}));
        sigma.set(meta.at("log_sigma1"), meta.at("log_sigma2"));
        restore_rng(rng, meta.at("rng").get<std::string>());
        start_epoch = meta.at("epoch").get<int>() + 1;
        result.best_epoch = meta.at("best_epoch");
        result.best_macro_f1 = meta.at("best_metric");
        result.steps = meta.value("steps", 0);
        for (const auto& h : meta.at("history")) {
            ClfEpochRecord r;
            r.epoch = h.at("epoch");
            r.lr = h.at("lr");
            r.train_loss = h.at("train_loss");
            r.val_macro_f1 = h.at("val_macro_f1");
            r.train_macro_f1 = h.value("train_macro_f1", -1.0);
            r.sigma1 = h.at("sigma1");
            r.sigma2 = h.at("sigma2");
            r.seconds = h.at("seconds");
            result.history.push_back(r);
        }
        rewrite_log(log_path, meta.at("history"));
        auto best = classifier::build_model(model.config());
        const json bm = load_checkpoint(settings.out_dir / "best", *best);
        best_state = nn::flatten_state(*best);
        best_sigma = {bm.value("log_sigma1", 0.0), bm.value("log_sigma2", 0.0)};
    } else if (files) {
        io::write_text_atomic(log_path, "");
    }

    const auto n = static_cast<std::int64_t>(train.inputs.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    bool stop = false;

    for (int epoch = start_epoch; epoch < tc.epochs && !stop; ++epoch) {
        const auto t0 = Clock::now();
        const double lr = lr_schedule(epoch, tc);
        std::iota(order.begin(), order.end(), std::int64_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::int64_t b0 = 0; b0 < n && !stop; b0 += tc.batch_size) {
            const std::int64_t N = std::min<std::int64_t>(tc.batch_size, n - b0);
            const std::int64_t M = 2 * N;
            std::vector<std::uint64_t> seeds(static_cast<std::size_t>(N));
            for (auto& s : seeds) s = rng();
            std::vector<Tensor> views(static_cast<std::size_t>(M));
            std::vector<int> labels(static_cast<std::size_t>(M));
            CMC_OMP_PRAGMA("omp parallel for schedule(static)")
            for (std::int64_t k = 0; k < N; ++k) {
                const auto src = static_cast<std::size_t>(order[static_cast<std::size_t>(b0 + k)]);
                std::mt19937_64 r(seeds[static_cast<std::size_t>(k)]);
                auto [a, b] = classifier::augment_two_views(train.inputs[src], model.config(), r);
                views[static_cast<std::size_t>(k)] = std::move(a);
                views[static_cast<std::size_t>(N + k)] = std::move(b);
                labels[static_cast<std::size_t>(k)] = labels[static_cast<std::size_t>(N + k)] = train.labels[src];
            }
            Tensor x = stack(views);
            Matrix y_mix;
            if (settings.use_mixup) {
                const double lambda = sample_beta(settings.mixup_alpha, rng);
                std::vector<std::size_t> perm(static_cast<std::size_t>(M));
                std::iota(perm.begin(), perm.end(), std::size_t{0});
                std::shuffle(perm.begin(), perm.end(), rng);
                std::vector<Tensor> mixed(static_cast<std::size_t>(M));
                y_mix = Matrix(M, volumes::kNumClasses);
                for (std::int64_t i = 0; i < M; ++i) {
                    const auto ui = static_cast<std::size_t>(i);
                    const auto yi = volumes::SeverityLabel::from_index(labels[ui]).one_hot();
                    const auto yp = volumes::SeverityLabel::from_index(labels[perm[ui]]).one_hot();
                    auto mix = losses::mixup_pair(views[ui], yi, views[perm[ui]], yp, lambda);
                    mixed[ui] = std::move(mix.x);
                    std::copy(mix.y.begin(), mix.y.end(), y_mix.row(i));
                }
                x = concat_rows(x, stack(mixed));
            }

            opt.zero_grad();
            const auto out = model.forward_all(x, nn::Phase::train);
            require_finite(out.logits, "classifier output", epoch);
            require_finite(out.z, "projection", epoch);
            const Matrix logits_all = to_matrix(out.logits);
            Matrix logits_view(M, logits_all.cols);
            std::copy_n(logits_all.v.begin(), M * logits_all.cols, logits_view.v.begin());

            const auto clf = losses::weighted_ce(logits_view, labels, alpha);
            losses::LossResult mix, con;
            if (settings.use_mixup) {
                Matrix logits_mix(M, logits_all.cols);
                std::copy(logits_all.v.begin() + M * logits_all.cols, logits_all.v.end(), logits_mix.v.begin());
                mix = losses::mixup_loss(logits_mix, y_mix);
            } else {
                mix.per_sample.assign(static_cast<std::size_t>(M), 0.0);
            }
            Matrix z_view;
            if (settings.use_contrastive) {
                const Matrix z_all = to_matrix(out.z);
                z_view = Matrix(M, z_all.cols);
                std::copy_n(z_all.v.begin(), M * z_all.cols, z_view.v.begin());
                con = losses::supervised_contrastive_loss(z_view, labels, settings.contrastive);
            }

            double loss = 0.0, w_con = 0.0, w_other = 1.0;
            if (settings.use_contrastive) {
                const auto joint = losses::adaptive_joint_loss(con.per_sample, mix.per_sample, clf.per_sample, sigma.weights());
                loss = joint.value;
                w_con = joint.coef_con * static_cast<double>(M);
                w_other = joint.coef_other * static_cast<double>(M);
                sigma.set_grad(joint.d_log_sigma1, joint.d_log_sigma2);
            } else {
                loss = clf.value + (settings.use_mixup ? mix.value : 0.0);
            }
            if (!std::isfinite(loss)) {
                throw NonFiniteLoss("non-finite classification loss at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(result.steps));
            }

            Tensor dlogits(out.logits.shape());
            const std::int64_t K = logits_all.cols;
            for (std::int64_t i = 0; i < M * K; ++i) dlogits[i] = static_cast<float>(w_other * clf.grad.v[static_cast<std::size_t>(i)]);
            if (settings.use_mixup) {
                for (std::int64_t i = 0; i < M * K; ++i) {
                    dlogits[M * K + i] = static_cast<float>(w_other * mix.grad.v[static_cast<std::size_t>(i)]);
                }
            }
            Tensor dz;
            if (settings.use_contrastive) {
                dz = Tensor(out.z.shape());
                const std::int64_t P = out.z.dim(1);
                for (std::int64_t i = 0; i < M * P; ++i) dz[i] = static_cast<float>(w_con * con.grad.v[static_cast<std::size_t>(i)]);
            }
            model.backward_all(dz, dlogits);
            clip_gradients(params, tc.grad_clip);
            opt.step(lr);

            result.step_losses.push_back(loss);
            loss_sum += loss;
            ++batches;
            ++result.steps;
            if (settings.max_steps > 0 && result.steps >= settings.max_steps) stop = true;
        }

        ClfEpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = loss_sum / std::max(1, batches);
        rec.val_macro_f1 = score(model, val, std::max(1, 2 * tc.batch_size));
        if (settings.eval_train) rec.train_macro_f1 = score(model, train, std::max(1, 2 * tc.batch_size));
        const auto w = sigma.weights();
        rec.sigma1 = w.sigma1();
        rec.sigma2 = w.sigma2();
        rec.seconds = seconds_since(t0);
        result.history.push_back(rec);
        if (rec.val_macro_f1 > result.best_macro_f1) {
            result.best_macro_f1 = rec.val_macro_f1;
            result.best_epoch = epoch;
            best_state = nn::flatten_state(model);
            best_sigma = w;
            if (files) {
                json meta = meta_base();
                meta["epoch"] = epoch;
                meta["best_metric"] = rec.val_macro_f1;
                save_checkpoint(settings.out_dir / "best", model, nullptr, meta);
            }
        }
        if (files) {
            append_line(log_path, rec.to_json());
            json meta = meta_base();
            meta["epoch"] = epoch;
            meta["best_epoch"] = result.best_epoch;
            meta["best_metric"] = result.best_macro_f1;
            meta["steps"] = result.steps;
            meta["rng"] = rng_state(rng);
            json hist = json::array();
            for (const auto& h : result.history) hist.push_back(h.to_json());
            meta["history"] = hist;
            save_checkpoint(settings.out_dir / "last", model, &opt, meta);
        }
        if (on_epoch) on_epoch(rec);
    }
    nn::load_state(model, best_state);
    result.sigmas = best_sigma;
    return result;
}

// ---------------------------------------------------------------- loading

LoadedSegModel load_seg_model(const fs::path& stem) {
    LoadedSegModel m;
    m.meta = read_checkpoint_meta(stem);
    if (m.meta.value("kind", "") != "seg") throw ValidationError(stem.string() + " is not a segmentation checkpoint");
    m.model = segmentation::make_seg_model(segmentation::SegConfig::from_json(m.meta.at("model")));
    load_checkpoint(stem, *m.model);
    m.stage = volumes::mask_kind_from_string(m.meta.at("stage").get<std::string>());
    m.slice_size = m.meta.at("slice_size").get<std::int64_t>();
    m.threshold = m.meta.value("threshold", 0.5);
    return m;
}

LoadedClassifier load_classifier(const fs::path& stem) {
    LoadedClassifier c;
    c.meta = read_checkpoint_meta(stem);
    if (c.meta.value("kind", "") != "clf") throw ValidationError(stem.string() + " is not a classifier checkpoint");
    c.model = classifier::build_model(classifier::ClassifierConfig::from_json(c.meta.at("model")));
    load_checkpoint(stem, *c.model);
    c.mode = mode_from_string(c.meta.at("mode").get<std::string>());
    c.input_dims = c.meta.at("input_dims").get<volumes::Dims>();
    return c;
}

segmentation::TwoStageResult infer_scan_masks(LoadedSegModel& m1, LoadedSegModel& m2, const volumes::CTVolume& v) {
    if (m1.stage != volumes::MaskKind::lung || m2.stage != volumes::MaskKind::infection) {
        throw ValidationError("infer masks: expected a lung checkpoint and an infection checkpoint");
    }
    if (m1.slice_size != m2.slice_size) throw ValidationError("infer masks: the two checkpoints use different slice sizes");
    const auto d = v.dims();
    const volumes::Dims work{d[0], m1.slice_size, m1.slice_size};
    const auto resized = work == d ? v : volumes::resample_volume(v, work);
    auto r = segmentation::two_stage_inference(*m1.model, *m2.model, resized, m1.threshold);
    if (work != d) {
        r.lung = volumes::resample_mask(r.lung, d);
        r.infection = volumes::resample_mask(r.infection, d);
    }
    r.lung.id = r.infection.id = v.id;
    return r;
}

// ---------------------------------------------------------------- config keys

std::vector<config::KeySpec> config_keys(Task task) {
    const TrainConfig d = TrainConfig::defaults(task);
    auto num = [](double v) {
        std::ostringstream os;
        os << v;
        return os.str();
    };
    std::vector<config::KeySpec> keys = {
        {"data_dir", std::nullopt, "dataset directory written by synth", ""},
        {"out_dir", std::nullopt, "output directory for checkpoints and logs", ""},
        {"seed", "0", "training seed", ""},
        {"workers", "0", "worker threads for data stages (0 = all cores)", ""},
        {"epochs", "100", "training epochs", "100"},
        {"batch_size", std::to_string(d.batch_size), "scans (clf) or slices (seg) per step", std::to_string(d.batch_size)},
        {"base_lr", num(d.base_lr), "initial learning rate", num(d.base_lr)},
        {"weight_decay", num(d.weight_decay), "L2 weight decay", num(d.weight_decay)},
        {"optimizer", optim::to_string(d.optimizer), "sgd or adam", optim::to_string(d.optimizer)},
        {"momentum", "0.9", "SGD momentum", ""},
        {"milestones", "0.3,0.8", "epoch fractions where the learning rate drops by 10x", "0.3,0.8"},
        {"grad_clip", "0", "global gradient-norm clip (0 = off)", ""},
        {"resume", "false", "continue from out_dir/last when present", ""},
    };
    if (task == Task::seg) {
        keys.insert(keys.end(), {
            {"stage", "lung", "lung (M1) or infection (M2)", ""},
            {"seg_arch", "unet", "segmentation architecture", ""},
            {"base_width", "16", "channels of the first U-Net level", ""},
            {"levels", "4", "U-Net resolution levels", ""},
            {"slice_size", "128", "slices are resized to slice_size x slice_size", "256"},
            {"slices_per_scan", "0", "evenly spaced slices taken per scan (0 = all)", ""},
            {"threshold", "0.5", "binarisation threshold for validation", ""},
            {"augment", "true", "random crop, flips and rotation", ""},
            {"crop_scale_min", "0.8", "smallest crop side fraction", ""},
            {"max_rotation", "15", "rotation range in degrees", ""},
            {"flips", "true", "random horizontal and vertical flips", ""},
        });
    } else {
        keys.insert(keys.end(), {
            {"mode", "infection_aware", "plain, lung_aware or infection_aware", ""},
            {"masks", "", "directory of predicted infection masks (empty = ground truth)", ""},
            {"input_dims", "32,64,64", "classifier input T,H,W", "64,256,256"},
            {"widths", "16,32,64,128,256", "encoder stage widths", ""},
            {"blocks_per_stage", "1", "residual blocks per stage", ""},
            {"stem_stride", "1,2,2", "stride of the stem convolution", ""},
            {"projection_dim", "64", "projection head output size", ""},
            {"temperature", "0.1", "contrastive temperature", ""},
            {"normalize_projections", "true", "L2-normalise projections", ""},
            {"mixup_alpha", "0.2", "Beta(a, a) parameter for the mixup weight", ""},
            {"use_contrastive", "true", "enable the contrastive loss and adaptive weights", ""},
            {"use_mixup", "true", "enable the mixup loss", ""},
            {"class_counts", "", "class counts for CE weights (empty = training split)", "85,62,85,26"},
            {"crop_area_min", "0.7", "smallest random-crop area fraction", ""},
            {"crop_area_max", "1.0", "largest random-crop area fraction", ""},
            {"contrast_jitter", "0.2", "contrast factor range 1 +- jitter", ""},
            {"init_log_sigma", "0", "initial log sigma for both loss weights", ""},
        });
    }
    return keys;
}

TrainConfig train_config_from(const config::Config& c, Task task) {
    TrainConfig t = TrainConfig::defaults(task);
    t.epochs = static_cast<int>(c.integer("epochs"));
    t.batch_size = static_cast<int>(c.integer("batch_size"));
    t.base_lr = c.real("base_lr");
    t.weight_decay = c.real("weight_decay");
    t.optimizer = optim::kind_from_string(c.str("optimizer"));
    t.momentum = c.real("momentum");
    t.milestones = c.reals("milestones");
    t.grad_clip = c.real("grad_clip");
    t.seed = static_cast<std::uint64_t>(c.integer("seed"));
    t.validate();
    return t;
}

SegTrainSettings seg_settings_from(const config::Config& c) {
    SegTrainSettings s;
    s.train = train_config_from(c, Task::seg);
    s.stage = volumes::mask_kind_from_string(c.str("stage"));
    s.model.arch = c.str("seg_arch");
    s.model.base_width = c.integer("base_width");
    s.model.levels = static_cast<int>(c.integer("levels"));
    s.model.seed = s.train.seed;
    s.threshold = c.real("threshold");
    s.use_augmentation = c.flag("augment");
    s.augment.crop_scale_min = c.real("crop_scale_min");
    s.augment.max_rotation_deg = c.real("max_rotation");
    s.augment.flips = c.flag("flips");
    s.out_dir = c.str("out_dir");
    s.resume = c.flag("resume");
    if (!(s.threshold > 0.0 && s.threshold < 1.0)) throw ValidationError("threshold must be in (0,1)");
    if (!(s.augment.crop_scale_min > 0.0 && s.augment.crop_scale_min <= 1.0)) {
        throw ValidationError("crop_scale_min must be in (0,1]");
    }
    return s;
}

ClfTrainSettings clf_settings_from(const config::Config& c) {
    ClfTrainSettings s;
    s.train = train_config_from(c, Task::clf);
    s.mode = mode_from_string(c.str("mode"));
    const auto dims = c.integers("input_dims");
    if (dims.size() != 3) throw ValidationError("input_dims expects T,H,W");
    s.input_dims = {dims[0], dims[1], dims[2]};
    s.model.in_channels = input_channels(s.mode);
    s.model.widths = c.integers("widths");
    s.model.blocks_per_stage = static_cast<int>(c.integer("blocks_per_stage"));
    const auto stride = c.integers("stem_stride");
    if (stride.size() != 3) throw ValidationError("stem_stride expects three values");
    s.model.stem_stride = {stride[0], stride[1], stride[2]};
    s.model.projection_dim = c.integer("projection_dim");
    s.model.crop_area_min = c.real("crop_area_min");
    s.model.crop_area_max = c.real("crop_area_max");
    s.model.contrast_jitter = c.real("contrast_jitter");
    s.model.seed = s.train.seed;
    s.model.validate();
    s.contrastive.temperature = c.real("temperature");
    s.contrastive.normalize = c.flag("normalize_projections");
    s.mixup_alpha = c.real("mixup_alpha");
    s.use_contrastive = c.flag("use_contrastive");
    s.use_mixup = c.flag("use_mixup");
    if (const auto cc = c.integers("class_counts"); !cc.empty()) {
        if (cc.size() != volumes::kNumClasses) throw ValidationError("class_counts expects 4 values");
        std::array<std::int64_t, volumes::kNumClasses> a{};
        std::copy(cc.begin(), cc.end(), a.begin());
        s.class_counts = a;
    }
    s.init_log_sigma = c.real("init_log_sigma");
    s.out_dir = c.str("out_dir");
    s.resume = c.flag("resume");
    if (!(s.contrastive.temperature > 0.0)) throw ValidationError("temperature must be > 0");
    if (!(s.mixup_alpha > 0.0)) throw ValidationError("mixup_alpha must be > 0");
    return s;
}

}  // namespace cmc::training
