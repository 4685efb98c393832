// Acceptance gate: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset; exits non-zero when any selected criterion fails.
#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "fever/cli/pipeline.hpp"
#include "fever/losses/losses.hpp"
#include "fever/train/checkpoint.hpp"
#include "gradient_cases.hpp"
#include "loss_oracles.hpp"
#include "test_util.hpp"

using namespace fever;
using ndgrad::Array;
using ndgrad::Mode;
using ndgrad::Tape;
using testing::gaussian_array;
using testing::random_pairs;
using testing::to_rows;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, const char* f = "%.4g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Verdict {
    bool pass;
    std::string detail;
};

// ---- loss evaluation helpers ----------------------------------------------------------

double triplet(const Array<double>& v, const std::vector<SimilarPair>& y, losses::TripletLossConfig cfg = {}) {
    Tape<double> tape(Mode::eval);
    return losses::fec_triplet_loss(tape.constant(v), std::span<const SimilarPair>(y), cfg).value().item();
}

double ce(const Array<double>& logits, const std::vector<std::size_t>& y) {
    Tape<double> tape(Mode::eval);
    return losses::cross_entropy_loss(tape.constant(logits), std::span<const std::size_t>(y)).value().item();
}

double rkd_d(const Array<double>& z, const Array<double>& t) {
    Tape<double> tape(Mode::eval);
    return losses::rkd_distance_loss(tape.constant(z), tape.constant(t)).value().item();
}

double rkd_a(const Array<double>& z, const Array<double>& t) {
    Tape<double> tape(Mode::eval);
    return losses::rkd_angle_loss(tape.constant(z), tape.constant(t)).value().item();
}

Array<double> scaled(Array<double> x, double c) {
    for (auto& v : x.data()) v *= c;
    return x;
}

// rows -> scale * R row + shift with R a random orthogonal matrix
Array<double> similarity(const Array<double>& x, std::uint64_t seed, double scale) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    const auto g = gaussian_array({d, d}, seed);
    Eigen::MatrixXd m(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) m(i, j) = g[i * d + j];
    const Eigen::MatrixXd r = Eigen::HouseholderQR<Eigen::MatrixXd>(m).householderQ();
    const auto shift = gaussian_array({d}, seed + 1, 5.0);
    Array<double> out(x.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a) {
            double s = 0;
            for (std::size_t b = 0; b < d; ++b) s += r(a, b) * x[i * d + b];
            out[i * d + a] = scale * s + shift[a];
        }
    return out;
}

// ---- shared desk setup ----------------------------------------------------------------

cli::RunConfig desk_config() { return cli::parse_config(fs::path(FEVER_SOURCE_DIR) / "configs" / "desk.ini"); }

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---- criteria -------------------------------------------------------------------------

Verdict ac1_gradients() {
    const auto t0 = Clock::now();
    double worst = 0;
    std::string worst_name;
    std::size_t cases = 0;
    auto all = testing::op_gradient_cases();
    for (auto& c : testing::loss_gradient_cases()) all.push_back(std::move(c));
    for (const auto& c : all) {
        ++cases;
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            const double e = c.run(seed);
            if (!(e <= worst)) worst = e, worst_name = c.name;
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-4 && secs < 60.0, std::to_string(cases) + " ops/losses x 10 seeds, max rel err " + num(worst) +
                                               " (" + worst_name + "), " + num(secs, "%.1f") + " s"};
}

Verdict ac2_oracles() {
    double e_tri = 0, e_ce = 0, e_d = 0, e_a = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto v = gaussian_array({30, 32}, seed, 0.3);
        const auto y = random_pairs(10, seed);
        for (bool norm : {true, false})
            e_tri = std::max(e_tri, std::abs(triplet(v, y, {0.2, norm}) -
                                             testing::oracle_triplet_loss(to_rows(v), y, 0.2, norm)));
        const auto logits = testing::random_array({16, 8}, seed, -5, 5);
        const auto labels = testing::random_labels(16, 8, seed);
        e_ce = std::max(e_ce, std::abs(ce(logits, labels) - testing::oracle_cross_entropy(to_rows(logits), labels)));
        const auto z = gaussian_array({8, 32}, seed + 7);
        const auto t = gaussian_array({8, 80}, seed + 1000);
        e_d = std::max(e_d, std::abs(rkd_d(z, t) - testing::oracle_rkd_distance(to_rows(z), to_rows(t))));
        e_a = std::max(e_a, std::abs(rkd_a(z, t) - testing::oracle_rkd_angle(to_rows(z), to_rows(t))));
    }
    const double worst = std::max({e_tri, e_ce, e_d, e_a});
    return {worst <= 1e-6, "100 instances each; max |diff| triplet " + num(e_tri) + ", ce " + num(e_ce) +
                               ", rkd_d " + num(e_d) + ", rkd_a " + num(e_a)};
}

Verdict ac3_anchors() {
    const double uniform = ce(Array<double>::zeros({8, 8}), {0, 1, 2, 3, 4, 5, 6, 7});
    const double d_ce = std::abs(uniform - std::log(8.0));
    auto same = Array<double>::zeros({12, 5});
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t k = 0; k < 5; ++k) same[i * 5 + k] = 0.3 + 0.1 * k;
    const auto pairs = random_pairs(4, 3);
    const double d_tri = std::max(std::abs(triplet(same, pairs, {0.2, true}) - 0.4),
                                  std::abs(triplet(same, pairs, {0.2, false}) - 0.4));
    const double total = losses::student_total_loss(1.0, 1.0, 1.0, 1.0, losses::LossWeights{});
    return {d_ce <= 1e-6 && d_tri <= 1e-6 && total == 76.1,
            "|CE - ln 8| " + num(d_ce) + ", |triplet - 2m| " + num(d_tri) + ", student_total(1,1,1,1) " +
                num(total, "%.15g") + (total == 76.1 ? " (== 76.1 exactly)" : "")};
}

Verdict ac4_invariances() {
    double worst_d = 0, worst_a = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto z = gaussian_array({9, 6}, seed);
        const auto t = gaussian_array({9, 10}, seed + 100);
        const double base_d = rkd_d(z, t);
        for (double c : {0.01, 0.5, 3.0, 400.0}) {
            worst_d = std::max(worst_d, std::abs(rkd_d(scaled(z, c), t) - base_d));
            worst_d = std::max(worst_d, std::abs(rkd_d(z, scaled(t, c)) - base_d));
        }
        const auto tz = gaussian_array({7, 6}, seed + 200);
        const auto tt = gaussian_array({7, 6}, seed + 300);
        const double base_a = rkd_a(tz, tt);
        for (double c : {0.2, 7.0}) {
            worst_a = std::max(worst_a, std::abs(rkd_a(similarity(tz, seed + 400, c), tt) - base_a));
            worst_a = std::max(worst_a, std::abs(rkd_a(tz, similarity(tt, seed + 500, c)) - base_a));
        }
    }
    return {worst_d <= 1e-6 && worst_a <= 1e-6,
            "20 draws; max change distance " + num(worst_d) + " (rescaling), angle " + num(worst_a) +
                " (rotation + scale + shift)"};
}

Verdict ac5_plumbing() {
    models::ModelConfig t256, t128;
    t256.d_face = 256;
    t128.d_face = 128;
    const distill::TeacherEnsemble<float> ens({models::Network<float>(t256, 11), models::Network<float>(t128, 12)});

    // Full-size batch mix drawn through the sampler.
    data::SynthConfig synth;
    const auto tri = data::gen_synthetic_triplets(72, synth, 1);
    const auto lab = data::gen_synthetic_labeled(32, synth, 2);
    const auto unl = data::gen_synthetic_unlabeled(32, synth, 3);
    data::StreamSampler sampler(tri, lab, &unl, 4);
    const auto b = sampler.next_batches({36, 16, 16});
    const auto crops = distill::assemble_distill_batch(b.triplets, b.labeled, b.unlabeled);
    const auto target = distill::build_distill_target(ens, crops);

    double worst = 0;
    for (std::size_t r = 0; r < target.dim(0); ++r)
        for (auto [lo, hi] : {std::pair{0, 32}, {32, 40}, {40, 72}, {72, 80}}) {
            double s = 0;
            for (int c = lo; c < hi; ++c) s += double(target[r * 80 + c]) * target[r * 80 + c];
            worst = std::max(worst, std::abs(std::sqrt(s) - 1.0));
        }

    // Student training against the frozen ensemble.
    const std::uint64_t before = ens.checksum();
    models::ModelConfig sc;
    sc.d_face = 32;
    sc.dropout_rate = 0.2;
    sc.heads.distill = ens.target_dim();
    models::Network<float> student(sc, 13);
    train::TrainConfig cfg;
    cfg.steps = 5;
    cfg.batch = {36, 16, 16};
    train::Trainer trainer(cfg, student, {&tri, &lab, &unl}, &ens);
    trainer.run();
    const std::uint64_t after = ens.checksum();

    const bool ok = ens.target_dim() == 80 && target.dim(1) == 80 && worst <= 1e-5 && crops.dim(0) == 140 &&
                    before == after;
    return {ok, "target dim " + std::to_string(target.dim(1)) + ", max |segment norm - 1| " + num(worst) +
                    ", distill batch " + std::to_string(crops.dim(0)) + " crops, checksum " +
                    (before == after ? "unchanged" : "CHANGED") + " over 5 student steps"};
}

Verdict ac6_chance() {
    const std::size_t n = 10000;
    Array<float> emb({3 * n, 16});
    const auto g = gaussian_array({3 * n, 16}, 99);
    for (std::size_t i = 0; i < g.size(); ++i) emb[i] = static_cast<float>(g[i]);
    const double tri = eval::triplet_accuracy(emb, random_pairs(n, 98));

    const cli::RunConfig c = desk_config();
    const auto balanced = data::gen_synthetic_labeled(800, cli::synth_config(c), 97);
    const std::size_t nets = 20;
    double cls = 0;
    for (std::uint64_t s = 0; s < nets; ++s)
        cls += eval::classifier_accuracy(models::Network<float>(cli::teacher_model(c, 0), 1000 + s), balanced);
    cls /= nets;
    return {std::abs(tri - 1.0 / 3.0) <= 0.02 && std::abs(cls - 0.125) <= 0.02,
            "random-embedding triplet accuracy " + num(tri) + " (n = 10000), untrained 8-class accuracy " +
                num(cls) + " (mean of " + std::to_string(nets) + " inits, 800 balanced samples)"};
}

Verdict ac7_end_to_end() {
    cli::RunConfig c = desk_config();
    c.teacher.steps = 2000;
    const auto t0 = Clock::now();
    const cli::Datasets d = cli::load_datasets(c, c.seed);
    std::vector<double> totals;
    const auto net = cli::train_teacher_model(c, d, 0, c.seed,
                                              [&](const train::StepMetrics& m) { totals.push_back(m.total); });
    const double tri = eval::triplet_accuracy(net, d.test_triplets, c.triplet.normalize_embeddings);
    const double cls = eval::classifier_accuracy(net, d.test_labeled);
    const double secs = seconds_since(t0);
    auto mean = [](auto b, auto e) { return std::accumulate(b, e, 0.0) / std::distance(b, e); };
    const double first = mean(totals.begin(), totals.begin() + 50), last = mean(totals.end() - 50, totals.end());
    return {tri >= 0.70 && cls >= 0.60 && secs < 600.0,
            "2000 steps (batch " + std::to_string(c.teacher.batch_triplets) + "/" +
                std::to_string(c.teacher.batch_labeled) + "): test triplet " + num(tri) + ", 8-class " + num(cls) +
                ", loss " + num(first) + " -> " + num(last) + " (mean of first/last 50 steps), " +
                num(secs, "%.0f") + " s"};
}

Verdict ac8_ablation() {
    cli::RunConfig c = desk_config();
    c.seeds = 3;
    const auto t0 = Clock::now();
    const auto r = cli::run_ablation(c, {}, [](const std::string& s) { std::printf("  .. %s\n", s.c_str()); std::fflush(stdout); });
    std::printf("%s", r.table().c_str());
    double teacher = 0, none = 0, no_unl = 0, full = 0;
    for (const auto& m : r.medians) {
        if (m.name == "teacher") teacher = m.eval.transfer_accuracy;
        if (m.name == "student_no_distill") none = m.eval.transfer_accuracy;
        if (m.name == "distilled_no_unlabeled") no_unl = m.eval.transfer_accuracy;
        if (m.name == "distilled") full = m.eval.transfer_accuracy;
    }
    (void)teacher;
    return {full >= none && full >= no_unl - 0.01,
            "median transfer probe over 3 seeds: distilled " + num(full) + " vs no-distillation " + num(none) +
                ", vs distilled-no-unlabeled " + num(no_unl) + " (tolerance 1 pp), " + num(seconds_since(t0), "%.0f") +
                " s"};
}

Verdict ac9_determinism() {
    cli::RunConfig c = desk_config();
    c.seeds = 1;
    c.teacher.steps = 30;
    c.student.steps = 30;
    const fs::path root = fs::temp_directory_path() / "fever_acceptance_ac9";
    fs::remove_all(root);
    const auto a = cli::run_ablation(c, root / "a");
    const auto b = cli::run_ablation(c, root / "b");
    std::size_t files = 0, same = 0;
    for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
        if (e.path().extension() != ".jsonl") continue;
        ++files;
        if (slurp(e.path()) == slurp(root / "b" / fs::relative(e.path(), root / "a"))) ++same;
    }
    const bool reruns = files == 5 && same == files && a.csv() == b.csv();

    // Resume: 10 steps, checkpoint to disk, reload, 10 more; compare with 20 straight.
    const cli::Datasets d = cli::load_datasets(c, c.seed);
    std::vector<models::Network<float>> teachers;
    for (std::size_t i = 0; i < c.teacher_d_faces.size(); ++i)
        teachers.push_back(train::load_network(root / "a" / "seed0" / ("teacher" + std::to_string(i) + ".ckpt")));
    const distill::TeacherEnsemble<float> ens(std::move(teachers));
    train::TrainConfig cfg = cli::student_phase(c, d, cli::StudentVariant::distilled, c.seed);
    cfg.steps = 20;
    const models::ModelConfig mc = cli::student_model(c, ens.target_dim());

    models::Network<float> straight(mc, 5);
    train::Trainer full(cfg, straight, d.train_data(true), &ens);
    const auto all = full.run();

    models::Network<float> first(mc, 5);
    train::Trainer part(cfg, first, d.train_data(true), &ens);
    for (int i = 0; i < 10; ++i) part.train_step();
    const train::TrainState st = part.state();
    train::save_checkpoint(root / "mid.ckpt", first, &st);
    const train::Checkpoint ck = train::load_checkpoint(root / "mid.ckpt");
    models::Network<float> resumed = train::network_from_checkpoint(ck);
    train::Trainer second(cfg, resumed, d.train_data(true), &ens);
    second.restore(*ck.train);
    const auto tail = second.run();
    bool metrics_equal = tail.size() == 10;
    for (std::size_t i = 0; metrics_equal && i < 10; ++i) metrics_equal = tail[i] == all[10 + i];
    const bool params_equal = models::parameter_checksum(resumed) == models::parameter_checksum(straight);
    fs::remove_all(root);

    return {reruns && metrics_equal && params_equal,
            std::to_string(same) + "/" + std::to_string(files) + " metrics files bitwise equal across reruns; resume " +
                "after 10 student steps: metrics " + (metrics_equal ? "identical" : "DIFFER") + ", parameters " +
                (params_equal ? "identical" : "DIFFER") + " for the next 10"};
}

Verdict ac10_alpha_isolation() {
    const cli::RunConfig c = desk_config();
    const cli::Datasets d = cli::load_datasets(c, c.seed);
    models::Network<float> net(cli::teacher_model(c, 0), 21);
    const auto w0 = models::find_array(net.params(), "head.cls.weight");
    const auto b0 = models::find_array(net.params(), "head.cls.bias");
    const auto f0 = models::find_array(net.params(), "head.fec.weight");
    train::TrainConfig cfg = cli::teacher_train(c, 22);
    cfg.steps = 100;
    cfg.weights.alpha = 0.0;
    train::train_teacher(cfg, d.train_data(false), net);
    const bool cls_same = ndgrad::bitwise_equal(models::find_array(net.params(), "head.cls.weight"), w0) &&
                          ndgrad::bitwise_equal(models::find_array(net.params(), "head.cls.bias"), b0);
    const bool fec_moved = !ndgrad::bitwise_equal(models::find_array(net.params(), "head.fec.weight"), f0);
    return {cls_same && fec_moved, std::string("classifier head ") + (cls_same ? "bitwise unchanged" : "CHANGED") +
                                       " after 100 steps with alpha = 0; FEC head " +
                                       (fec_moved ? "updated" : "NOT updated")};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
        {"gradient suite", ac1_gradients},
        {"loss oracles", ac2_oracles},
        {"analytic anchors", ac3_anchors},
        {"RKD invariances", ac4_invariances},
        {"distillation plumbing", ac5_plumbing},
        {"chance levels", ac6_chance},
        {"end-to-end synthetic learning", ac7_end_to_end},
        {"ablation direction", ac8_ablation},
        {"determinism and persistence", ac9_determinism},
        {"alpha isolation", ac10_alpha_isolation},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!selected.empty() && !selected.count(id)) continue;
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        if (!v.pass) ++failed;
        std::printf("AC%-2d %s  %s: %s\n", id, v.pass ? "PASS" : "FAIL", criteria[i].first, v.detail.c_str());
        std::fflush(stdout);
    }
    return failed ? 1 : 0;
}
