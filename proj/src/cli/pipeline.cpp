#include "fever/cli/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <random>
#include <sstream>

#include "fever/data/manifest.hpp"
#include "fever/errors.hpp"
#include "fever/train/checkpoint.hpp"

namespace fever::cli {

namespace {

std::uint64_t derive(std::uint64_t seed, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5eedu, stream};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (std::uint64_t{out[0]} << 32) | out[1];
}

std::filesystem::path resolve(const RunConfig& c, const std::string& p, const char* key) {
    if (p.empty()) throw ConfigError(std::string("data.") + key, std::string("data.") + key + ": required when data.source = \"manifest\"");
    std::filesystem::path path(p);
    return path.is_absolute() ? path : c.base_dir / path;
}

data::LabeledDataset labeled_manifest(const RunConfig& c, const std::string& p, const char* key,
                                      std::size_t num_classes) {
    return data::load_labeled_manifest(resolve(c, p, key), num_classes, c.data.channels);
}

void check_shape(const RunConfig& c, const ImageShape& s, const char* what) {
    if (s != image_shape(c))
        throw DataError(std::string(what) + ": images are " + s.str() + ", config expects " +
                        image_shape(c).str());
}

}  // namespace

Seeds seeds_for(std::uint64_t run_seed) {
    return {derive(run_seed, 0), derive(run_seed, 1), derive(run_seed, 2), derive(run_seed, 3), derive(run_seed, 4)};
}

Datasets load_datasets(const RunConfig& c, std::uint64_t seed) {
    Datasets d;
    if (c.data.source == "manifest") {
        const auto& m = c.data;
        d.triplets = data::load_triplet_manifest(resolve(c, m.triplets, "triplets"), m.channels);
        d.test_triplets = data::load_triplet_manifest(resolve(c, m.test_triplets, "test_triplets"), m.channels);
        d.labeled = labeled_manifest(c, m.labeled, "labeled", m.num_classes);
        d.test_labeled = labeled_manifest(c, m.test_labeled, "test_labeled", m.num_classes);
        if (!m.unlabeled.empty())
            d.unlabeled = data::load_unlabeled_manifest(resolve(c, m.unlabeled, "unlabeled"), m.channels);
        else
            d.unlabeled.shape = image_shape(c);
        if (!m.transfer_train.empty() || !m.transfer_test.empty()) {
            d.transfer_train = labeled_manifest(c, m.transfer_train, "transfer_train", m.transfer_classes);
            d.transfer_test = labeled_manifest(c, m.transfer_test, "transfer_test", m.transfer_classes);
        }
        check_shape(c, d.triplets.shape, "triplets");
        check_shape(c, d.test_triplets.shape, "test_triplets");
        check_shape(c, d.labeled.shape, "labeled");
        check_shape(c, d.test_labeled.shape, "test_labeled");
        if (d.unlabeled.size()) check_shape(c, d.unlabeled.shape, "unlabeled");
        if (d.transfer_train.size()) {
            check_shape(c, d.transfer_train.shape, "transfer_train");
            check_shape(c, d.transfer_test.shape, "transfer_test");
        }
        return d;
    }
    const data::SynthConfig s = synth_config(c), t = transfer_synth_config(c);
    const std::uint64_t base = seeds_for(seed).data;
    d.triplets = data::gen_synthetic_triplets(c.data.n_triplets, s, derive(base, 0));
    d.labeled = data::gen_synthetic_labeled(c.data.n_labeled, s, derive(base, 1));
    d.unlabeled = data::gen_synthetic_unlabeled(c.data.n_unlabeled, s, derive(base, 2));
    d.test_triplets = data::gen_synthetic_triplets(c.data.n_test_triplets, s, derive(base, 3));
    d.test_labeled = data::gen_synthetic_labeled(c.data.n_test_labeled, s, derive(base, 4));
    d.transfer_train = data::gen_synthetic_labeled(c.data.n_transfer_train, t, derive(base, 5));
    d.transfer_test = data::gen_synthetic_labeled(c.data.n_transfer_test, t, derive(base, 6));
    return d;
}

std::uint64_t teacher_init_seed(std::uint64_t run_seed, std::size_t which) {
    return derive(seeds_for(run_seed).teacher_init, static_cast<std::uint32_t>(which));
}

train::TrainConfig teacher_phase(const RunConfig& c, std::size_t which, std::uint64_t run_seed) {
    return teacher_train(c, derive(seeds_for(run_seed).teacher_train, static_cast<std::uint32_t>(which)));
}

models::Network<float> train_teacher_model(const RunConfig& c, const Datasets& d, std::size_t which,
                                           std::uint64_t run_seed, const StepSink& sink) {
    models::Network<float> net(teacher_model(c, which), teacher_init_seed(run_seed, which));
    train::train_teacher(teacher_phase(c, which, run_seed), d.train_data(false), net, sink);
    return net;
}

const char* variant_name(StudentVariant v) {
    switch (v) {
        case StudentVariant::no_distillation: return "student_no_distill";
        case StudentVariant::distilled_no_unlabeled: return "distilled_no_unlabeled";
        case StudentVariant::distilled: return "distilled";
    }
    return "?";
}

StudentVariant parse_variant(const std::string& name) {
    for (auto v : {StudentVariant::no_distillation, StudentVariant::distilled_no_unlabeled, StudentVariant::distilled})
        if (name == variant_name(v)) return v;
    throw ConfigError("variant", "variant: unknown '" + name +
                                     "', expected student_no_distill, distilled_no_unlabeled or distilled");
}

train::TrainConfig student_phase(const RunConfig& c, const Datasets& d, StudentVariant v, std::uint64_t run_seed) {
    train::TrainConfig t = student_train(c, seeds_for(run_seed).student_train);
    if (v == StudentVariant::no_distillation) t.weights.lambda_dist = t.weights.lambda_angle = 0;
    if (v != StudentVariant::distilled || d.unlabeled.size() == 0) t.batch.unlabeled = 0;
    return t;
}

models::Network<float> train_student_model(const RunConfig& c, const Datasets& d,
                                           const distill::TeacherEnsemble<float>& ensemble, StudentVariant v,
                                           std::uint64_t run_seed, const StepSink& sink) {
    const train::TrainConfig t = student_phase(c, d, v, run_seed);
    models::Network<float> net(student_model(c, ensemble.target_dim()), seeds_for(run_seed).student_init);
    train::train_student(t, d.train_data(t.batch.unlabeled > 0), ensemble, net, sink);
    return net;
}

double probe_accuracy(const RunConfig& c, const models::Network<float>& net, const data::LabeledDataset& train,
                      const data::LabeledDataset& test, bool* converged) {
    const eval::FeatureFile ftrain = eval::extract_features(net, train);
    const eval::FeatureFile ftest = eval::extract_features(net, test);
    const std::size_t k = std::max(train.num_classes, test.num_classes);
    const eval::LinearProbe probe = eval::fit_linear_probe(eval::to_matrix(ftrain.rows), train.labels, k, c.probe);
    if (converged) *converged = probe.converged;
    return eval::accuracy(eval::predict(probe, eval::to_matrix(ftest.rows)), test.labels);
}

Evaluation evaluate_model(const RunConfig& c, const Datasets& d, const models::Network<float>& net) {
    Evaluation e;
    e.triplet_accuracy = eval::triplet_accuracy(net, d.test_triplets, c.triplet.normalize_embeddings);
    bool ok = true;
    e.probe_accuracy = probe_accuracy(c, net, d.labeled, d.test_labeled, &ok);
    e.probes_converged = ok;
    if (d.transfer_train.size() && d.transfer_test.size()) {
        e.transfer_accuracy = probe_accuracy(c, net, d.transfer_train, d.transfer_test, &ok);
        e.probes_converged = e.probes_converged && ok;
    }
    return e;
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

std::string AblationResult::table() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-24s %10s %10s %10s\n", "model", "triplet", "probe", "transfer");
    os << line;
    for (const auto& r : medians) {
        std::snprintf(line, sizeof line, "%-24s %10.4f %10.4f %10.4f\n", r.name.c_str(), r.eval.triplet_accuracy,
                      r.eval.probe_accuracy, r.eval.transfer_accuracy);
        os << line;
    }
    return os.str();
}

std::string AblationResult::csv() const {
    std::ostringstream os;
    os << "model,seed,triplet_accuracy,probe_accuracy,transfer_accuracy,probes_converged\n";
    auto row = [&](const AblationRow& r, const std::string& seed) {
        os << r.name << ',' << seed << ',' << fmt(r.eval.triplet_accuracy) << ',' << fmt(r.eval.probe_accuracy) << ','
           << fmt(r.eval.transfer_accuracy) << ',' << (r.eval.probes_converged ? "true" : "false") << '\n';
    };
    for (const auto& r : rows) row(r, std::to_string(r.seed));
    for (const auto& r : medians) row(r, "median");
    return os.str();
}

AblationResult run_ablation(const RunConfig& c, const std::filesystem::path& out_dir,
                            const std::function<void(const std::string&)>& progress) {
    constexpr std::array variants{StudentVariant::no_distillation, StudentVariant::distilled_no_unlabeled,
                                  StudentVariant::distilled};
    auto say = [&](const std::string& s) {
        if (progress) progress(s);
    };
    AblationResult result;
    for (std::size_t k = 0; k < c.seeds; ++k) {
        const std::uint64_t seed = c.seed + k;
        const Datasets d = load_datasets(c, seed);
        std::filesystem::path dir;
        if (!out_dir.empty()) {
            dir = out_dir / ("seed" + std::to_string(seed));
            std::filesystem::create_directories(dir);
        }
        auto logged = [&](const std::string& stem, const auto& train) {
            if (dir.empty()) return train(StepSink{});
            train::MetricsLog log(dir / (stem + ".metrics.jsonl"));
            auto net = train(log.sink());
            train::save_checkpoint(dir / (stem + ".ckpt"), net);
            return net;
        };

        std::vector<models::Network<float>> teachers;
        for (std::size_t i = 0; i < c.teacher_d_faces.size(); ++i) {
            say("seed " + std::to_string(seed) + ": teacher " + std::to_string(i));
            teachers.push_back(logged("teacher" + std::to_string(i), [&](const StepSink& sink) {
                return train_teacher_model(c, d, i, seed, sink);
            }));
        }
        result.rows.push_back({"teacher", seed, evaluate_model(c, d, teachers.front())});
        const distill::TeacherEnsemble<float> ensemble(std::move(teachers));
        for (StudentVariant v : variants) {
            say("seed " + std::to_string(seed) + ": " + variant_name(v));
            auto net = logged(variant_name(v), [&](const StepSink& sink) {
                return train_student_model(c, d, ensemble, v, seed, sink);
            });
            result.rows.push_back({variant_name(v), seed, evaluate_model(c, d, net)});
        }
    }

    const std::size_t per_seed = 1 + variants.size();
    for (std::size_t j = 0; j < per_seed; ++j) {
        std::vector<double> tri, probe, transfer;
        bool converged = true;
        for (std::size_t k = 0; k < c.seeds; ++k) {
            const auto& e = result.rows[k * per_seed + j].eval;
            tri.push_back(e.triplet_accuracy);
            probe.push_back(e.probe_accuracy);
            transfer.push_back(e.transfer_accuracy);
            converged = converged && e.probes_converged;
        }
        result.medians.push_back(
            {result.rows[j].name, c.seed, {median(tri), median(probe), median(transfer), converged}});
    }
    return result;
}

}  // namespace fever::cli
