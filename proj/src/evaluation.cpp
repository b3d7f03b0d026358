#include "cmc/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <numeric>

#include "cmc/io.hpp"

namespace cmc::evaluation {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- F1

void ConfusionMatrix::add(int truth, int pred) {
    if (truth < 0 || truth >= kClasses || pred < 0 || pred >= kClasses) {
        throw ValidationError("confusion matrix: class index out of range");
    }
    ++counts[static_cast<std::size_t>(truth)][static_cast<std::size_t>(pred)];
}

std::int64_t ConfusionMatrix::total() const {
    std::int64_t n = 0;
    for (const auto& row : counts)
        for (auto v : row) n += v;
    return n;
}

ConfusionMatrix ConfusionMatrix::from(std::span<const int> truth, std::span<const int> pred) {
    if (truth.size() != pred.size()) throw ValidationError("confusion matrix: length mismatch");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], pred[i]);
    return cm;
}

json ConfusionMatrix::to_json() const { return counts; }

F1Scores f1_per_class(const ConfusionMatrix& cm) {
    F1Scores s;
    for (std::size_t c = 0; c < kClasses; ++c) {
        const std::int64_t tp = cm.counts[c][c];
        std::int64_t fp = 0, fn = 0;
        for (std::size_t k = 0; k < kClasses; ++k) {
            if (k == c) continue;
            fp += cm.counts[k][c];
            fn += cm.counts[c][k];
        }
        s.absent[c] = tp + fp + fn == 0;
        // 2PR/(P+R) written as 2TP/(2TP+FP+FN); 0 when there are no true positives.
        s.f1[c] = tp == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    }
    return s;
}

double macro_f1(std::span<const double> per_class) {
    if (per_class.empty()) return 0.0;
    return std::accumulate(per_class.begin(), per_class.end(), 0.0) / static_cast<double>(per_class.size());
}

double macro_f1(const ConfusionMatrix& cm) { return macro_f1(f1_per_class(cm).f1); }

// ---------------------------------------------------------------- CAM

Tensor class_activation(const Tensor& f, std::span<const float> weights) {
    if (f.rank() != 4) throw ValidationError("CAM feature maps must be (K,T,H,W), got " + shape_str(f.shape()));
    const std::int64_t K = f.dim(0);
    if (static_cast<std::int64_t>(weights.size()) != K) {
        throw ValidationError("classifier head is not CAM-compatible: " + std::to_string(weights.size()) +
                              " weights for " + std::to_string(K) + " feature channels");
    }
    const std::int64_t n = f.dim(1) * f.dim(2) * f.dim(3);
    Tensor cam({f.dim(1), f.dim(2), f.dim(3)});
    for (std::int64_t k = 0; k < K; ++k) {
        const float w = weights[static_cast<std::size_t>(k)];
        const float* fk = f.data() + k * n;
        for (std::int64_t i = 0; i < n; ++i) cam[i] += w * fk[i];
    }
    return cam;
}

Tensor compute_cam(const Tensor& feature_maps, std::span<const float> weights, const volumes::Dims& target) {
    const Tensor raw = class_activation(feature_maps, weights);
    Tensor up({target[0], target[1], target[2]});
    kernels::resize3d(raw.storage(), {raw.dim(0), raw.dim(1), raw.dim(2)}, up.storage(), target, kernels::Interp::trilinear);
    const auto [lo, hi] = std::minmax_element(up.storage().begin(), up.storage().end());
    const float mn = *lo, range = *hi - *lo;
    for (auto& v : up.storage()) v = range > 0.0f ? (v - mn) / range : 0.0f;
    return up;
}

Tensor model_cam(classifier::CMCModel& model, const Tensor& input, int cls) {
    if (input.rank() != 4) throw ValidationError("model_cam: input must be (C,T,H,W)");
    const Tensor x = input.reshaped({1, input.dim(0), input.dim(1), input.dim(2), input.dim(3)});
    const auto out = model.forward_all(x, nn::Phase::eval);
    if (cls < 0) {
        Probs p{};
        const auto prob = losses::softmax(to_matrix(out.logits));
        for (int c = 0; c < kClasses; ++c) p[static_cast<std::size_t>(c)] = prob(0, c);
        cls = argmax(p);
    }
    if (cls >= kClasses) throw ValidationError("model_cam: class out of range");
    const Tensor& fm = model.last_feature_maps();
    const Tensor maps = fm.reshaped({fm.dim(1), fm.dim(2), fm.dim(3), fm.dim(4)});
    const Tensor& w = model.classifier_head().weight();
    const std::int64_t K = w.dim(1);
    return compute_cam(maps, std::span<const float>(w.data() + cls * K, static_cast<std::size_t>(K)),
                       {input.dim(1), input.dim(2), input.dim(3)});
}

void write_cam(const Tensor& cam, const std::string& id, const fs::path& dir) {
    if (cam.rank() != 3) throw ValidationError("write_cam: heatmap must be (T,H,W)");
    volumes::CTVolume v;
    v.data = cam;
    v.normalized = true;
    v.id = id + "_cam";
    fs::create_directories(dir);
    volumes::save_volume(v, dir);
    const fs::path slices = dir / id;
    fs::create_directories(slices);
    const std::int64_t T = cam.dim(0), H = cam.dim(1), W = cam.dim(2);
    for (std::int64_t t = 0; t < T; ++t) {
        std::string bytes = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
        for (std::int64_t i = 0; i < H * W; ++i) {
            const float v01 = std::clamp(cam[t * H * W + i], 0.0f, 1.0f);
            bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v01 * 255.0f))));
        }
        char name[32];
        std::snprintf(name, sizeof name, "slice_%03lld.pgm", static_cast<long long>(t));
        io::write_file_atomic(slices / name, std::span<const char>(bytes.data(), bytes.size()));
    }
}

// ---------------------------------------------------------------- ensembles

Probs average_probs(std::span<const Probs> per_model) {
    if (per_model.empty()) throw ValidationError("ensemble: no models");
    Probs out{};
    for (const auto& p : per_model)
        for (std::size_t c = 0; c < kClasses; ++c) out[c] += p[c];
    for (auto& v : out) v /= static_cast<double>(per_model.size());
    return out;
}

int argmax(const Probs& p) {
    int best = 0;
    for (int c = 1; c < kClasses; ++c)
        if (p[static_cast<std::size_t>(c)] > p[static_cast<std::size_t>(best)]) best = c;
    return best;
}

std::vector<Probs> ensemble_predict(std::span<const Member> members, const std::vector<const dataset::Scan*>& scans,
                                    int batch) {
    if (members.empty()) throw ValidationError("ensemble: no models");
    std::vector<std::vector<Probs>> per_member;
    for (const auto& m : members) {
        if (!m.model) throw ValidationError("ensemble: null model");
        if (m.model->config().in_channels != training::input_channels(m.mode)) {
            throw ValidationError("ensemble member '" + m.name + "' has in_channels=" +
                                  std::to_string(m.model->config().in_channels) + " but mode " +
                                  training::to_string(m.mode));
        }
        const auto in = training::prepare_inputs(scans, m.mode, m.input_dims);
        per_member.push_back(training::predict(*m.model, in.inputs, batch).probs);
    }
    std::vector<Probs> out(scans.size());
    std::vector<Probs> row(members.size());
    for (std::size_t i = 0; i < scans.size(); ++i) {
        for (std::size_t k = 0; k < members.size(); ++k) row[k] = per_member[k][i];
        out[i] = average_probs(row);
    }
    return out;
}

// ---------------------------------------------------------------- reports

json MetricsReport::to_json() const {
    json j;
    j["per_class_f1"] = per_class_f1;
    j["absent_classes"] = absent;
    j["macro_f1"] = macro_f1;
    j["confusion"] = confusion.to_json();
    j["num_scans"] = confusion.total();
    if (infection_iou) j["infection_iou"] = *infection_iou;
    if (infection_miou) j["infection_miou"] = *infection_miou;
    json rows = json::array();
    for (const auto& s : scans) rows.push_back({{"id", s.id}, {"truth", s.truth}, {"pred", s.pred}, {"probs", s.probs}});
    j["scans"] = rows;
    j["metadata"] = metadata;
    j["generated_at"] = generated_at;
    return j;
}

std::string MetricsReport::canonical() const {
    json j = to_json();
    j.erase("generated_at");
    return j.dump(2);
}

MetricsReport evaluate(std::span<const Member> members, const std::vector<const dataset::Scan*>& scans,
                       const EvalOptions& opt) {
    if (scans.empty()) throw ValidationError("evaluate: empty split");
    const auto probs = ensemble_predict(members, scans, opt.batch);
    MetricsReport r;
    for (std::size_t i = 0; i < scans.size(); ++i) {
        ScanResult s;
        s.id = scans[i]->id;
        s.truth = scans[i]->label.index();
        s.probs = probs[i];
        s.pred = argmax(probs[i]);
        r.confusion.add(s.truth, s.pred);
        r.scans.push_back(s);
    }
    const auto f1 = f1_per_class(r.confusion);
    r.per_class_f1 = f1.f1;
    r.absent = f1.absent;
    r.macro_f1 = macro_f1(r.per_class_f1);
    json names = json::array();
    for (const auto& m : members) {
        names.push_back({{"name", m.name}, {"mode", training::to_string(m.mode)}, {"input_dims", m.input_dims}});
    }
    r.metadata["models"] = names;
    r.metadata["split"] = opt.split;
    r.metadata["ensemble_rule"] = "mean softmax, ties to lowest class";
    r.generated_at = utc_timestamp();

    if (opt.cam_dir) {
        const Member& m = members.front();
        for (std::size_t i = 0; i < scans.size(); ++i) {
            const Tensor in = training::make_input(*scans[i], m.mode, m.input_dims);
            Tensor cam = model_cam(*m.model, in, r.scans[i].pred);
            const auto d = scans[i]->volume.dims();
            if (volumes::Dims{cam.dim(0), cam.dim(1), cam.dim(2)} != d) {
                Tensor up({d[0], d[1], d[2]});
                kernels::resize3d(cam.storage(), {cam.dim(0), cam.dim(1), cam.dim(2)}, up.storage(), d,
                                  kernels::Interp::trilinear);
                cam = std::move(up);
            }
            write_cam(cam, scans[i]->id, *opt.cam_dir);
        }
    }
    return r;
}

void add_mask_overlap(MetricsReport& report, const std::vector<const dataset::Scan*>& predicted,
                      const std::vector<const dataset::Scan*>& truth) {
    if (predicted.size() != truth.size()) throw ValidationError("mask overlap: scan count mismatch");
    segmentation::OverlapCounts c;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i]->infection.dims != truth[i]->infection.dims) throw ValidationError("mask overlap: shape mismatch");
        c.add(predicted[i]->infection.data, truth[i]->infection.data);
    }
    report.infection_iou = c.iou();
    report.infection_miou = c.miou();
}

void write_report(const MetricsReport& r, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    io::write_text_atomic(path, r.to_json().dump(2) + "\n");
}

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace cmc::evaluation
