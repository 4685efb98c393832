#include "fever/cli/app.hpp"

#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "fever/cli/pipeline.hpp"
#include "fever/data/manifest.hpp"
#include "fever/errors.hpp"
#include "fever/train/checkpoint.hpp"
#include "json.hpp"

namespace fever::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "run config (.ini); defaults when omitted")->check(CLI::ExistingFile);
    sub->add_option("--out", c.out, "output directory")->required();
    sub->add_option("--seed", c.seed, "overrides run.seed");
}

RunConfig load_config(const Common& c) {
    RunConfig config = c.config.empty() ? parse_config_text("") : parse_config(c.config);
    if (c.seed) config.seed = *c.seed;
    return config;
}

// Records what a command wrote so a run directory is self-describing.
class Outputs {
public:
    Outputs(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
        fs::create_directories(dir_);
    }
    fs::path path(const std::string& name) {
        files_.push_back(name);
        return dir_ / name;
    }
    void finish(const RunConfig& config) {
        write_text("config.resolved.ini", to_text(config));
        std::ostringstream m;
        m << "command: " << command_ << '\n';
        for (const auto& f : files_) {
            std::error_code ec;
            const auto size = fs::file_size(dir_ / f, ec);
            m << f << '\t' << (ec ? std::string("missing") : std::to_string(size)) << '\n';
        }
        std::ofstream(dir_ / "MANIFEST.txt") << m.str();
    }
    void write_text(const std::string& name, const std::string& text) {
        std::ofstream os(path(name), std::ios::binary);
        os << text;
        if (!os) throw DataError("cannot write " + (dir_ / name).string());
    }

private:
    fs::path dir_;
    std::string command_;
    std::vector<std::string> files_;
};

std::string join_args(int argc, const char* const* argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
    return s;
}

// Splits the CLI knows by name; triplet splits carry the pair code as the row label.
bool is_triplet_split(const std::string& s) { return s == "triplets" || s == "test_triplets"; }

const data::LabeledDataset& labeled_split(const Datasets& d, const std::string& s) {
    if (s == "labeled") return d.labeled;
    if (s == "test_labeled") return d.test_labeled;
    if (s == "transfer_train") return d.transfer_train;
    if (s == "transfer_test") return d.transfer_test;
    throw ConfigError("split", "split: unknown '" + s + "'");
}

const data::TripletDataset& triplet_split(const Datasets& d, const std::string& s) {
    return s == "triplets" ? d.triplets : d.test_triplets;
}

const std::vector<std::string> kSplits{"triplets",     "test_triplets",  "labeled",
                                       "test_labeled", "transfer_train", "transfer_test"};

eval::FeatureFile features_for(const models::Network<float>& net, const Datasets& d, const std::string& split,
                               eval::FeatureSource source) {
    if (is_triplet_split(split)) {
        const auto& ds = triplet_split(d, split);
        eval::FeatureFile f = eval::extract_features(net, ds.images, source);
        std::vector<std::int32_t> labels;
        for (SimilarPair p : ds.pairs)
            for (int k = 0; k < 3; ++k) labels.push_back(pair_code(p));
        f.labels = std::move(labels);
        return f;
    }
    return eval::extract_features(net, labeled_split(d, split), source);
}

std::vector<SimilarPair> pairs_from_labels(const eval::FeatureFile& f) {
    if (!f.labels) throw DataError("feature file has no labels; triplet files carry the pair code per row");
    if (f.count() % 3) throw DataError("triplet feature file has " + std::to_string(f.count()) + " rows, not a multiple of 3");
    std::vector<SimilarPair> pairs;
    for (std::size_t i = 0; i < f.count(); i += 3) {
        const int code = (*f.labels)[i];
        if (code != 12 && code != 13 && code != 23)
            throw DataError("row " + std::to_string(i) + ": label " + std::to_string(code) + " is not a pair code 12, 13 or 23");
        pairs.push_back(pair_from_code(code));
    }
    return pairs;
}

std::vector<std::size_t> class_labels(const eval::FeatureFile& f) {
    if (!f.labels) throw DataError("feature file has no labels");
    std::vector<std::size_t> out;
    for (auto l : *f.labels) {
        if (l < 0) throw DataError("negative label " + std::to_string(l) + " in feature file");
        out.push_back(static_cast<std::size_t>(l));
    }
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << std::fixed << v;
    return os.str();
}

// Trains with periodic resumable checkpoints; the final checkpoint keeps the state too.
void run_training(train::Trainer& trainer, models::Network<float>& net, Outputs& outs, const std::string& stem,
                  bool append, std::size_t every, std::ostream& out) {
    const fs::path ckpt = outs.path(stem + ".ckpt");
    train::MetricsLog log(outs.path(stem + ".metrics.jsonl"), append);
    std::optional<train::StepMetrics> last;
    trainer.run([&](const train::StepMetrics& m) {
        log.write(m);
        last = m;
        if (every && m.step % every == 0) {
            const train::TrainState st = trainer.state();
            train::save_checkpoint(ckpt, net, &st);
        }
    });
    const train::TrainState st = trainer.state();
    train::save_checkpoint(ckpt, net, &st);
    if (last) out << "step " << last->step << " total " << fmt(last->total) << '\n';
    out << "wrote " << ckpt.string() << '\n';
}

int cmd_gen_data(const Common& common, std::ostream& out, const std::string& command) {
    RunConfig c = load_config(common);
    if (c.data.source != "synthetic") throw ConfigError("data.source", "data.source: gen-data needs \"synthetic\"");
    const Datasets d = load_datasets(c, c.seed);
    Outputs outs(common.out, command);
    const fs::path dir = common.out;
    auto rel = [&](const fs::path& p) { return outs.path(p.filename().string()), p.filename().string(); };
    c.data.triplets = rel(data::write_manifest(dir, "triplets", d.triplets));
    c.data.test_triplets = rel(data::write_manifest(dir, "test_triplets", d.test_triplets));
    c.data.labeled = rel(data::write_manifest(dir, "labeled", d.labeled));
    c.data.test_labeled = rel(data::write_manifest(dir, "test_labeled", d.test_labeled));
    c.data.unlabeled = rel(data::write_manifest(dir, "unlabeled", d.unlabeled));
    c.data.transfer_train = rel(data::write_manifest(dir, "transfer_train", d.transfer_train));
    c.data.transfer_test = rel(data::write_manifest(dir, "transfer_test", d.transfer_test));
    c.data.source = "manifest";
    c.base_dir = dir;
    outs.finish(c);
    out << "wrote manifests to " << dir.string() << "; reuse with --config "
        << (dir / "config.resolved.ini").string() << '\n';
    return 0;
}

int cmd_train_teacher(const Common& common, std::size_t which, const std::string& resume, std::size_t every,
                      std::ostream& out, const std::string& command) {
    const RunConfig c = load_config(common);
    if (which >= c.teacher_d_faces.size())
        throw ConfigError("which", "which: teacher " + std::to_string(which) + " but teacher.d_faces lists " +
                                       std::to_string(c.teacher_d_faces.size()));
    const Datasets d = load_datasets(c, c.seed);
    std::optional<train::Checkpoint> ck;
    if (!resume.empty()) {
        ck = train::load_checkpoint(resume);
        if (!ck->train) throw FormatError(resume + ": checkpoint has no training state");
    }
    models::Network<float> net =
        ck ? train::network_from_checkpoint(*ck) : models::Network<float>(teacher_model(c, which), teacher_init_seed(c.seed, which));
    train::Trainer trainer(teacher_phase(c, which, c.seed), net, d.train_data(false));
    if (ck) trainer.restore(*ck->train);
    Outputs outs(common.out, command);
    run_training(trainer, net, outs, "teacher" + std::to_string(which), ck.has_value(), every, out);
    outs.finish(c);
    return 0;
}

int cmd_train_student(const Common& common, const std::vector<std::string>& teachers, const std::string& variant,
                      const std::string& resume, std::size_t every, std::ostream& out, const std::string& command) {
    const RunConfig c = load_config(common);
    const StudentVariant v = parse_variant(variant);
    const Datasets d = load_datasets(c, c.seed);
    std::vector<models::Network<float>> nets;
    for (const auto& t : teachers) nets.push_back(train::load_network(t));
    const distill::TeacherEnsemble<float> ensemble(std::move(nets));
    std::optional<train::Checkpoint> ck;
    if (!resume.empty()) {
        ck = train::load_checkpoint(resume);
        if (!ck->train) throw FormatError(resume + ": checkpoint has no training state");
    }
    models::Network<float> net = ck ? train::network_from_checkpoint(*ck)
                                    : models::Network<float>(student_model(c, ensemble.target_dim()),
                                                             seeds_for(c.seed).student_init);
    const train::TrainConfig t = student_phase(c, d, v, c.seed);
    train::Trainer trainer(t, net, d.train_data(t.batch.unlabeled > 0), &ensemble);
    if (ck) trainer.restore(*ck->train);
    Outputs outs(common.out, command);
    run_training(trainer, net, outs, "student", ck.has_value(), every, out);
    outs.finish(c);
    return 0;
}

int cmd_extract(const Common& common, const std::string& checkpoint, const std::string& split,
                const std::string& source, bool csv, std::ostream& out, const std::string& command) {
    const RunConfig c = load_config(common);
    const auto net = train::load_network(checkpoint);
    const Datasets d = load_datasets(c, c.seed);
    const bool fec = source.empty() ? is_triplet_split(split) : source == "fec";
    const auto src = fec ? eval::FeatureSource::fec : eval::FeatureSource::embedding;
    const eval::FeatureFile f = features_for(net, d, split, src);
    Outputs outs(common.out, command);
    eval::write_feature_file(outs.path(split + ".features"), f);
    if (csv) eval::write_feature_csv(outs.path(split + ".csv"), f);
    outs.finish(c);
    out << "wrote " << f.count() << " x " << f.dims() << " features for " << split << '\n';
    return 0;
}

int cmd_eval_triplet(const Common& common, const std::string& features, const std::string& checkpoint,
                     const std::string& split, std::ostream& out, const std::string& command) {
    const RunConfig c = load_config(common);
    double acc = 0;
    std::size_t n = 0;
    if (!features.empty()) {
        const eval::FeatureFile f = eval::read_feature_file(features);
        const auto pairs = pairs_from_labels(f);
        acc = eval::triplet_accuracy(c.triplet.normalize_embeddings ? eval::normalized_rows(f.rows) : f.rows, pairs);
        n = pairs.size();
    } else {
        if (!is_triplet_split(split)) throw ConfigError("split", "split: eval-triplet needs triplets or test_triplets");
        const auto net = train::load_network(checkpoint);
        const Datasets d = load_datasets(c, c.seed);
        const auto& ds = triplet_split(d, split);
        acc = eval::triplet_accuracy(net, ds, c.triplet.normalize_embeddings);
        n = ds.pairs.size();
    }
    Outputs outs(common.out, command);
    nlohmann::ordered_json j{{"triplet_accuracy", acc}, {"triplets", n}};
    outs.write_text("eval_triplet.json", j.dump(2) + "\n");
    outs.finish(c);
    out << "triplet_accuracy " << fmt(acc) << " over " << n << " triplets\n";
    return 0;
}

int cmd_eval_probe(const Common& common, const std::string& checkpoint, const std::string& train_split,
                   const std::string& test_split, const std::string& train_features, const std::string& test_features,
                   std::ostream& out, const std::string& command) {
    const RunConfig c = load_config(common);
    eval::FeatureFile ftrain, ftest;
    if (!train_features.empty()) {
        ftrain = eval::read_feature_file(train_features);
        ftest = eval::read_feature_file(test_features);
    } else {
        const auto net = train::load_network(checkpoint);
        const Datasets d = load_datasets(c, c.seed);
        ftrain = eval::extract_features(net, labeled_split(d, train_split));
        ftest = eval::extract_features(net, labeled_split(d, test_split));
    }
    if (ftrain.dims() != ftest.dims())
        throw DataError("train features have " + std::to_string(ftrain.dims()) + " dims, test " +
                        std::to_string(ftest.dims()));
    const auto ytrain = class_labels(ftrain), ytest = class_labels(ftest);
    std::size_t k = 0;
    for (auto y : ytrain) k = std::max(k, y + 1);
    for (auto y : ytest) k = std::max(k, y + 1);
    const auto probe = eval::fit_linear_probe(eval::to_matrix(ftrain.rows), ytrain, k, c.probe);
    const double acc = eval::accuracy(eval::predict(probe, eval::to_matrix(ftest.rows)), ytest);
    Outputs outs(common.out, command);
    nlohmann::ordered_json j{{"probe_accuracy", acc},  {"classes", k},
                             {"train", ytrain.size()}, {"test", ytest.size()},
                             {"iterations", probe.iterations}, {"grad_norm", probe.grad_norm},
                             {"converged", probe.converged}};
    outs.write_text("eval_probe.json", j.dump(2) + "\n");
    outs.finish(c);
    out << "probe_accuracy " << fmt(acc) << (probe.converged ? "" : " (probe did not converge)") << '\n';
    return 0;
}

int cmd_ablate(const Common& common, std::ostream& out, const std::string& command) {
    const RunConfig c = load_config(common);
    Outputs outs(common.out, command);
    const AblationResult r =
        run_ablation(c, fs::path(common.out) / "runs", [&](const std::string& s) { out << s << std::endl; });
    outs.write_text("ablation.csv", r.csv());
    outs.write_text("ablation.txt", r.table());
    outs.finish(c);
    out << r.table();
    return 0;
}

int fail(std::ostream& err, const char* kind, const std::string& what, int code) {
    err << "error[" << kind << "] " << what << '\n';
    return code;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Desk-scale two-phase face-embedding training: teachers, distilled student, evaluation"};
    app.require_subcommand(1);

    Common gen_c, tt_c, ts_c, ex_c, et_c, ep_c, ab_c;
    std::size_t which = 0, every = 0;
    std::string resume, variant = "distilled", checkpoint, split = "test_triplets", source;
    std::vector<std::string> teachers;
    std::string features, train_split = "labeled", test_split = "test_labeled", train_features, test_features;
    bool csv = false;

    auto* gen = app.add_subcommand("gen-data", "write the synthetic datasets as PNG manifests");
    add_common(gen, gen_c);

    auto* tt = app.add_subcommand("train-teacher", "train one teacher on L_fec + alpha L_aff");
    add_common(tt, tt_c);
    tt->add_option("--which", which, "teacher index into teacher.d_faces");
    tt->add_option("--resume", resume, "resumable checkpoint to continue")->check(CLI::ExistingFile);
    tt->add_option("--checkpoint-every", every, "also checkpoint every N steps");

    auto* ts = app.add_subcommand("train-student", "train the student against a frozen teacher ensemble");
    add_common(ts, ts_c);
    ts->add_option("--teacher", teachers, "teacher checkpoint (repeat for the ensemble)")
        ->required()
        ->check(CLI::ExistingFile);
    ts->add_option("--variant", variant, "distilled | distilled_no_unlabeled | student_no_distill");
    ts->add_option("--resume", resume, "resumable checkpoint to continue")->check(CLI::ExistingFile);
    ts->add_option("--checkpoint-every", every, "also checkpoint every N steps");

    auto* ex = app.add_subcommand("extract-features", "write embedding or FEC features of a split");
    add_common(ex, ex_c);
    ex->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    ex->add_option("--split", split)->check(CLI::IsMember(kSplits));
    ex->add_option("--source", source, "default: fec for triplet splits, embedding otherwise")->check(CLI::IsMember({"embedding", "fec"}));
    ex->add_flag("--csv", csv, "also write CSV");

    auto* et = app.add_subcommand("eval-triplet", "triplet accuracy from features or a checkpoint");
    add_common(et, et_c);
    auto* et_f = et->add_option("--features", features, "feature file of a triplet split")->check(CLI::ExistingFile);
    auto* et_k = et->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
    et->add_option("--split", split)->check(CLI::IsMember({"triplets", "test_triplets"}));
    et_f->excludes(et_k);

    auto* ep = app.add_subcommand("eval-probe", "linear-probe accuracy on embedding features");
    add_common(ep, ep_c);
    auto* ep_k = ep->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
    ep->add_option("--train-split", train_split)->check(CLI::IsMember(kSplits));
    ep->add_option("--test-split", test_split)->check(CLI::IsMember(kSplits));
    auto* ep_tr = ep->add_option("--train-features", train_features)->check(CLI::ExistingFile);
    auto* ep_te = ep->add_option("--test-features", test_features)->check(CLI::ExistingFile);
    ep_tr->needs(ep_te);
    ep_te->needs(ep_tr);
    ep_k->excludes(ep_tr);

    auto* ab = app.add_subcommand("ablate", "teachers and the three student variants over run.seeds seeds");
    add_common(ab, ab_c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err);
        return fail(err, "usage", e.what(), 2);
    }

    const std::string command = join_args(argc, argv);
    try {
        if (*gen) return cmd_gen_data(gen_c, out, command);
        if (*tt) return cmd_train_teacher(tt_c, which, resume, every, out, command);
        if (*ts) return cmd_train_student(ts_c, teachers, variant, resume, every, out, command);
        if (*ex) return cmd_extract(ex_c, checkpoint, split, source, csv, out, command);
        if (*et) {
            if (features.empty() && checkpoint.empty())
                throw ConfigError("features", "eval-triplet: give --features or --checkpoint");
            return cmd_eval_triplet(et_c, features, checkpoint, split, out, command);
        }
        if (*ep) {
            if (checkpoint.empty() && train_features.empty())
                throw ConfigError("checkpoint", "eval-probe: give --checkpoint or --train-features/--test-features");
            return cmd_eval_probe(ep_c, checkpoint, train_split, test_split, train_features, test_features, out,
                                  command);
        }
        if (*ab) return cmd_ablate(ab_c, out, command);
    } catch (const ConfigError& e) {
        return fail(err, "config", e.what(), 2);
    } catch (const DataError& e) {
        return fail(err, "data", e.what(), 3);
    } catch (const FormatError& e) {
        return fail(err, "format", e.what(), 3);
    } catch (const NumericError& e) {
        return fail(err, "numeric", e.what(), 4);
    } catch (const ShapeError& e) {
        return fail(err, "shape", e.what(), 1);
    } catch (const std::exception& e) {
        return fail(err, "internal", e.what(), 1);
    }
    return 1;
}

}  // namespace fever::cli
