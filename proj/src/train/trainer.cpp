#include "fever/train/trainer.hpp"

#include <sstream>

#include "fever/errors.hpp"
#include "json.hpp"

namespace fever::train {

using ndgrad::Tape;
using ndgrad::Var;

namespace {

data::StreamSampler make_sampler(const TrainData& data, const TrainConfig& config) {
    if (!data.triplets || !data.labeled) throw std::invalid_argument("Trainer: triplet and labeled data required");
    return data::StreamSampler(*data.triplets, *data.labeled, data.unlabeled, config.seed, config.drop_last);
}

}  // namespace

void TrainConfig::validate() const {
    if (steps == 0 && epochs == 0) throw ConfigError("epochs", "epochs: must be > 0 when steps is 0");
    if (batch.triplets == 0) throw ConfigError("batch_triplets", "batch_triplets: must be > 0");
    if (batch.labeled == 0) throw ConfigError("batch_labeled", "batch_labeled: must be > 0");
    optim.validate();
    weights.validate();
    triplet.validate();
}

std::string StepMetrics::to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["l_fec"] = l_fec;
    j["l_aff"] = l_aff;
    j["l_rkd_d"] = l_rkd_d;
    j["l_rkd_a"] = l_rkd_a;
    j["total"] = total;
    return j.dump();
}

Trainer::Trainer(TrainConfig config, Network<float>& model, TrainData data,
                 const distill::TeacherEnsemble<float>* ensemble)
    : config_(std::move(config)),
      model_(&model),
      data_(data),
      ensemble_(ensemble),
      sampler_(make_sampler(data, config_)),
      velocity_(zero_velocity(model.params())) {
    config_.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32), 3u};
    dropout_rng_.seed(seq);
    if (!(data.triplets->shape == model.config().input)) {
        throw ShapeError("Trainer: data images are " + data.triplets->shape.str() + " but the model expects " +
                         model.config().input.str());
    }
    if (ensemble_) {
        if (!model.is_student() || *model.config().heads.distill != ensemble_->target_dim()) {
            throw ConfigError("distill_dim", "distill_dim: student distill head must have " +
                                                 std::to_string(ensemble_->target_dim()) + " outputs");
        }
        if (!(ensemble_->input_shape() == model.config().input)) {
            throw ShapeError("Trainer: teachers expect " + ensemble_->input_shape().str() + " but the student expects " +
                             model.config().input.str());
        }
        ensemble_checksum_ = ensemble_->checksum();
    }
}

std::uint64_t Trainer::planned_steps() const {
    if (config_.steps > 0) return config_.steps;
    return config_.epochs * sampler_.steps_per_epoch(config_.batch.triplets);
}

StepMetrics Trainer::train_step() {
    const std::uint64_t k = step_ + 1;
    try {
        const auto b = sampler_.next_batches(config_.batch);
        const Array<float> images = distill::assemble_distill_batch(b.triplets, b.labeled, b.unlabeled);
        const std::size_t n_fec = b.triplets.images.dim(0), n_aff = b.labeled.images.dim(0);

        Tape<float> tape(ndgrad::Mode::train);
        const auto bound = model_->bind(tape);
        const auto out = model_->forward(bound, tape.constant(images), dropout_rng_);
        const auto l_fec = losses::fec_triplet_loss(ndgrad::slice_rows(out.fec, 0, n_fec), b.triplets.pairs,
                                                    config_.triplet);
        const auto l_aff = losses::cross_entropy_loss(ndgrad::slice_rows(out.logits, n_fec, n_fec + n_aff),
                                                      b.labeled.labels);
        StepMetrics m{k, l_fec.value().item(), l_aff.value().item(), 0.0, 0.0, 0.0};
        Var<float> total;
        if (ensemble_) {
            const auto target = tape.constant(distill::build_distill_target(*ensemble_, images));
            const auto d = losses::rkd_distance_loss(*out.distill, target);
            const auto a = losses::rkd_angle_loss(*out.distill, target);
            m.l_rkd_d = d.value().item();
            m.l_rkd_a = a.value().item();
            total = losses::student_total_loss(l_fec, l_aff, d, a, config_.weights);
        } else {
            total = losses::teacher_total_loss(l_fec, l_aff, config_.weights);
        }
        m.total = total.value().item();

        tape.backward(total);
        std::vector<Array<float>> grads;
        grads.reserve(bound.size());
        for (const auto& p : bound) grads.push_back(tape.grad(p));
        sgd_nesterov_step(model_->params(), grads, velocity_, config_.optim);
        step_ = k;

        if (ensemble_ && ensemble_->checksum() != ensemble_checksum_) {
            throw InvariantError("teacher ensemble parameters changed during student training");
        }
        return m;
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(k) + ": " + e.what());
    }
}

std::vector<StepMetrics> Trainer::run(const std::function<void(const StepMetrics&)>& on_step) {
    std::vector<StepMetrics> log;
    const std::uint64_t n = planned_steps();
    while (step_ < n) {
        log.push_back(train_step());
        if (on_step) on_step(log.back());
    }
    return log;
}

TrainState Trainer::state() const {
    std::ostringstream rng;
    rng << dropout_rng_;
    return {step_, sampler_.state(), rng.str(), velocity_};
}

void Trainer::restore(const TrainState& state) {
    if (state.velocity.size() != velocity_.size()) throw ShapeError("Trainer::restore: velocity count differs");
    for (std::size_t i = 0; i < velocity_.size(); ++i) {
        if (state.velocity[i].name != velocity_[i].name ||
            state.velocity[i].value.shape() != velocity_[i].value.shape()) {
            throw ShapeError("Trainer::restore: velocity " + state.velocity[i].name + " does not match " +
                             velocity_[i].name);
        }
    }
    std::istringstream in(state.dropout_rng);
    ndgrad::Rng rng;
    if (!(in >> rng)) throw InvariantError("Trainer::restore: malformed dropout rng state");
    sampler_.restore(state.sampler);
    dropout_rng_ = rng;
    velocity_ = state.velocity;
    step_ = state.step;
}

std::vector<StepMetrics> train_teacher(const TrainConfig& config, const TrainData& data, Network<float>& model,
                                       const std::function<void(const StepMetrics&)>& on_step) {
    Trainer trainer(config, model, data);
    return trainer.run(on_step);
}

std::vector<StepMetrics> train_student(const TrainConfig& config, const TrainData& data,
                                       const distill::TeacherEnsemble<float>& ensemble, Network<float>& student,
                                       const std::function<void(const StepMetrics&)>& on_step) {
    Trainer trainer(config, student, data, &ensemble);
    return trainer.run(on_step);
}

MetricsLog::MetricsLog(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw DataError("cannot write metrics log " + path.string());
}

void MetricsLog::write(const StepMetrics& m) {
    out_ << m.to_json() << '\n';
    out_.flush();
}

std::vector<StepMetrics> read_metrics(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open metrics log " + path.string());
    std::vector<StepMetrics> out;
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("step").get<std::uint64_t>(), j.at("l_fec").get<double>(), j.at("l_aff").get<double>(),
                           j.at("l_rkd_d").get<double>(), j.at("l_rkd_a").get<double>(), j.at("total").get<double>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace fever::train
