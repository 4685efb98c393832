#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "fever/cli/config.hpp"
#include "fever/distill/distill.hpp"

namespace fever::cli {

struct Datasets {
    data::TripletDataset triplets, test_triplets;
    data::LabeledDataset labeled, test_labeled;
    data::UnlabeledDataset unlabeled;
    data::LabeledDataset transfer_train, transfer_test;  // held-out rendering, class subset

    train::TrainData train_data(bool with_unlabeled) const {
        return {&triplets, &labeled, with_unlabeled && unlabeled.size() ? &unlabeled : nullptr};
    }
};

// Synthetic sets are drawn from `seed`; manifests are read from disk and ignore it.
Datasets load_datasets(const RunConfig& c, std::uint64_t seed);

// Derived per-run seeds so that every model and sampler in a pipeline differs.
struct Seeds {
    std::uint64_t data, teacher_init, teacher_train, student_init, student_train;
};
Seeds seeds_for(std::uint64_t run_seed);
std::uint64_t teacher_init_seed(std::uint64_t run_seed, std::size_t which);

using StepSink = std::function<void(const train::StepMetrics&)>;

models::Network<float> train_teacher_model(const RunConfig& c, const Datasets& d, std::size_t which,
                                           std::uint64_t run_seed, const StepSink& sink = {});

train::TrainConfig teacher_phase(const RunConfig& c, std::size_t which, std::uint64_t run_seed);

enum class StudentVariant { no_distillation, distilled_no_unlabeled, distilled };
const char* variant_name(StudentVariant v);
StudentVariant parse_variant(const std::string& name);  // throws ConfigError

train::TrainConfig student_phase(const RunConfig& c, const Datasets& d, StudentVariant v, std::uint64_t run_seed);

// No-distillation sets both RKD weights to zero; the no-unlabeled variants drop the
// unlabeled stream. The ensemble is still built so the plumbing is identical.
models::Network<float> train_student_model(const RunConfig& c, const Datasets& d,
                                           const distill::TeacherEnsemble<float>& ensemble, StudentVariant v,
                                           std::uint64_t run_seed, const StepSink& sink = {});

struct Evaluation {
    double triplet_accuracy = 0;   // FEC head on the test triplets
    double probe_accuracy = 0;     // linear probe on embeddings, all classes
    double transfer_accuracy = 0;  // linear probe on the held-out rendering
    bool probes_converged = true;
};

Evaluation evaluate_model(const RunConfig& c, const Datasets& d, const models::Network<float>& net);

// Linear probe from features of `train` evaluated on `test`.
double probe_accuracy(const RunConfig& c, const models::Network<float>& net, const data::LabeledDataset& train,
                      const data::LabeledDataset& test, bool* converged = nullptr);

struct AblationRow {
    std::string name;
    std::uint64_t seed;
    Evaluation eval;
};

struct AblationResult {
    std::vector<AblationRow> rows;  // per seed, in table order
    std::vector<AblationRow> medians;  // one per table row, median over seeds

    std::string table() const;
    std::string csv() const;
};

// Teachers, then the three student variants, for seeds seed .. seed + seeds - 1.
// When out_dir is set, checkpoints and metrics of every run are written under it.
AblationResult run_ablation(const RunConfig& c, const std::filesystem::path& out_dir = {},
                            const std::function<void(const std::string&)>& progress = {});

}  // namespace fever::cli
