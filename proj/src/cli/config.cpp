#include "fever/cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "fever/errors.hpp"

namespace fever::cli {
namespace {

struct Field {
    std::string section;
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || end != v.data() + v.size()) {
        throw ConfigError(key, key + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out)) {
        throw ConfigError(key, key + ": expected a number, got '" + v + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(key, key + ": expected true or false, got '" + v + "'");
}

// Shortest form that reads back to the same double.
std::string print_double(double v) {
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

template <typename U>
Field uint_field(std::string section, std::string key, U& ref) {
    return {section, key, [&ref, key](const std::string& v) { ref = static_cast<U>(parse_uint(key, v)); },
            [&ref] { return std::to_string(ref); }};
}

Field double_field(std::string section, std::string key, double& ref) {
    return {section, key, [&ref, key](const std::string& v) { ref = parse_double(key, v); },
            [&ref] { return print_double(ref); }};
}

Field bool_field(std::string section, std::string key, bool& ref) {
    return {section, key, [&ref, key](const std::string& v) { ref = parse_bool(key, v); },
            [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field string_field(std::string section, std::string key, std::string& ref) {
    return {section, key,
            [&ref](const std::string& v) {
                ref = v.size() >= 2 && v.front() == '"' && v.back() == '"' ? v.substr(1, v.size() - 2) : v;
            },
            [&ref] { return ref; }};
}

Field list_field(std::string section, std::string key, std::vector<std::size_t>& ref) {
    return {section, key,
            [&ref, key](const std::string& v) {
                std::vector<std::size_t> out;
                std::stringstream ss(v);
                std::string item;
                while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, trim(item)));
                if (out.empty()) throw ConfigError(key, key + ": expected a comma-separated list");
                ref = std::move(out);
            },
            [&ref] {
                std::string s;
                for (auto x : ref) s += (s.empty() ? "" : ",") + std::to_string(x);
                return s;
            }};
}

void phase_fields(std::vector<Field>& f, const std::string& s, PhaseSection& p, bool unlabeled) {
    f.push_back(uint_field(s, "epochs", p.epochs));
    f.push_back(uint_field(s, "steps", p.steps));
    f.push_back(double_field(s, "dropout", p.dropout));
    f.push_back(uint_field(s, "batch_triplets", p.batch_triplets));
    f.push_back(uint_field(s, "batch_labeled", p.batch_labeled));
    if (unlabeled) f.push_back(uint_field(s, "batch_unlabeled", p.batch_unlabeled));
}

// Binds every key to a member of `c`; order here is the echo order.
std::vector<Field> fields(RunConfig& c) {
    std::vector<Field> f;
    f.push_back(uint_field("run", "seed", c.seed));
    f.push_back(uint_field("run", "seeds", c.seeds));

    auto& d = c.data;
    f.push_back(string_field("data", "source", d.source));
    f.push_back(uint_field("data", "channels", d.channels));
    f.push_back(uint_field("data", "height", d.height));
    f.push_back(uint_field("data", "width", d.width));
    f.push_back(uint_field("data", "num_classes", d.num_classes));
    f.push_back(double_field("data", "noise_sigma", d.noise_sigma));
    f.push_back(double_field("data", "brightness", d.brightness));
    f.push_back(uint_field("data", "prototype_seed", d.prototype_seed));
    f.push_back(uint_field("data", "n_triplets", d.n_triplets));
    f.push_back(uint_field("data", "n_labeled", d.n_labeled));
    f.push_back(uint_field("data", "n_unlabeled", d.n_unlabeled));
    f.push_back(uint_field("data", "n_test_triplets", d.n_test_triplets));
    f.push_back(uint_field("data", "n_test_labeled", d.n_test_labeled));
    f.push_back(uint_field("data", "transfer_classes", d.transfer_classes));
    f.push_back(double_field("data", "transfer_noise_sigma", d.transfer_noise_sigma));
    f.push_back(double_field("data", "transfer_brightness", d.transfer_brightness));
    f.push_back(double_field("data", "transfer_contrast", d.transfer_contrast));
    f.push_back(uint_field("data", "n_transfer_train", d.n_transfer_train));
    f.push_back(uint_field("data", "n_transfer_test", d.n_transfer_test));
    f.push_back(string_field("data", "triplets", d.triplets));
    f.push_back(string_field("data", "labeled", d.labeled));
    f.push_back(string_field("data", "unlabeled", d.unlabeled));
    f.push_back(string_field("data", "test_triplets", d.test_triplets));
    f.push_back(string_field("data", "test_labeled", d.test_labeled));
    f.push_back(string_field("data", "transfer_train", d.transfer_train));
    f.push_back(string_field("data", "transfer_test", d.transfer_test));

    f.push_back(string_field("model", "backbone", c.model.backbone));
    f.push_back(uint_field("model", "kernel_size", c.model.kernel_size));
    f.push_back(uint_field("model", "fec_dim", c.model.fec_dim));

    phase_fields(f, "teacher", c.teacher, false);
    f.push_back(list_field("teacher", "d_faces", c.teacher_d_faces));
    phase_fields(f, "student", c.student, true);
    f.push_back(uint_field("student", "d_face", c.student_d_face));

    f.push_back(double_field("optim", "lr", c.optim.lr));
    f.push_back(double_field("optim", "momentum", c.optim.momentum));
    f.push_back(bool_field("optim", "nesterov", c.optim.nesterov));

    f.push_back(double_field("loss", "alpha", c.loss.alpha));
    f.push_back(double_field("loss", "lambda_dist", c.loss.lambda_dist));
    f.push_back(double_field("loss", "lambda_angle", c.loss.lambda_angle));
    f.push_back(double_field("loss", "margin", c.triplet.margin));
    f.push_back(bool_field("loss", "normalize_embeddings", c.triplet.normalize_embeddings));

    f.push_back(double_field("probe", "C", c.probe.C));
    f.push_back(uint_field("probe", "max_iter", c.probe.max_iter));
    f.push_back(double_field("probe", "tol", c.probe.tol));
    f.push_back(bool_field("probe", "class_reweighting", c.probe.class_reweighting));
    f.push_back(bool_field("probe", "standardize", c.probe.standardize));
    return f;
}

std::vector<models::BlockSpec> parse_backbone(const std::string& text) {
    std::vector<models::BlockSpec> blocks;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        const auto slash = item.find('/');
        if (slash == std::string::npos) {
            throw ConfigError("backbone", "backbone: expected channels/stride items, got '" + item + "'");
        }
        blocks.push_back({parse_uint("backbone", trim(item.substr(0, slash))),
                          parse_uint("backbone", trim(item.substr(slash + 1)))});
    }
    if (blocks.empty()) throw ConfigError("backbone", "backbone: needs at least one block");
    return blocks;
}

void positive(const std::string& key, std::size_t v) {
    if (v == 0) throw ConfigError(key, key + ": must be > 0");
}

void non_negative(const std::string& key, double v) {
    if (!(v >= 0.0)) throw ConfigError(key, key + ": must be >= 0");
}

void check_phase(const PhaseSection& p, bool unlabeled_allowed) {
    if (p.epochs == 0 && p.steps == 0) throw ConfigError("epochs", "epochs: must be > 0 when steps is 0");
    if (!(p.dropout >= 0.0 && p.dropout < 1.0)) throw ConfigError("dropout", "dropout: must be in [0, 1)");
    positive("batch_triplets", p.batch_triplets);
    positive("batch_labeled", p.batch_labeled);
    if (!unlabeled_allowed && p.batch_unlabeled) throw ConfigError("batch_unlabeled", "batch_unlabeled: teacher only");
}

}  // namespace

void RunConfig::validate() const {
    const auto& d = data;
    if (d.source != "synthetic" && d.source != "manifest") {
        throw ConfigError("source", "source: must be synthetic or manifest, got '" + d.source + "'");
    }
    if (d.channels != 1 && d.channels != 3) throw ConfigError("channels", "channels: must be 1 or 3");
    positive("height", d.height);
    positive("width", d.width);
    if (d.num_classes < 2) throw ConfigError("num_classes", "num_classes: must be >= 2");
    non_negative("noise_sigma", d.noise_sigma);
    non_negative("brightness", d.brightness);
    if (d.transfer_classes < 2 || d.transfer_classes > d.num_classes) {
        throw ConfigError("transfer_classes", "transfer_classes: must be in [2, num_classes]");
    }
    non_negative("transfer_noise_sigma", d.transfer_noise_sigma);
    non_negative("transfer_brightness", d.transfer_brightness);
    if (!(d.transfer_contrast >= 0.0 && d.transfer_contrast < 1.0)) {
        throw ConfigError("transfer_contrast", "transfer_contrast: must be in [0, 1)");
    }
    if (d.source == "synthetic") {
        for (auto [key, n] : {std::pair{"n_triplets", d.n_triplets}, {"n_labeled", d.n_labeled},
                              {"n_test_triplets", d.n_test_triplets}, {"n_test_labeled", d.n_test_labeled},
                              {"n_transfer_train", d.n_transfer_train}, {"n_transfer_test", d.n_transfer_test}}) {
            positive(key, n);
        }
    } else {
        for (auto [key, p] : {std::pair{"triplets", &d.triplets}, {"labeled", &d.labeled},
                              {"test_triplets", &d.test_triplets}, {"test_labeled", &d.test_labeled}}) {
            if (p->empty()) throw ConfigError(key, std::string(key) + ": required when source = manifest");
        }
    }
    if (seeds == 0) throw ConfigError("seeds", "seeds: must be > 0");
    check_phase(teacher, false);
    check_phase(student, true);
    if (teacher_d_faces.empty()) throw ConfigError("d_faces", "d_faces: needs at least one teacher");
    for (auto v : teacher_d_faces) positive("d_faces", v);
    positive("d_face", student_d_face);
    parse_backbone(model.backbone);
    optim.validate();
    loss.validate();
    triplet.validate();
    probe.validate();
    teacher_model(*this, 0).validate();
    student_model(*this, 1).validate();
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

std::vector<std::string> known_keys(const std::string& section) {
    RunConfig scratch;
    std::vector<std::string> keys;
    for (const auto& f : fields(scratch)) {
        if (f.section == section) keys.push_back(f.key);
    }
    return keys;
}

RunConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir) {
    RunConfig c;
    c.base_dir = base_dir;
    auto table = fields(c);
    std::set<std::string> sections;
    for (const auto& f : table) sections.insert(f.section);

    std::istringstream in(text);
    std::string line, section;
    std::set<std::string> seen;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = "line " + std::to_string(number) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(line, where + "malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (!sections.count(section)) throw ConfigError(section, where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(line, where + "expected key = value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError(key, where + key + ": appears before any [section]");
        auto it = std::find_if(table.begin(), table.end(),
                               [&](const Field& f) { return f.section == section && f.key == key; });
        if (it == table.end()) {
            std::string best;
            std::size_t best_d = std::numeric_limits<std::size_t>::max();
            for (const auto& k : known_keys(section)) {
                const auto dist = edit_distance(key, k);
                if (dist < best_d) best_d = dist, best = k;
            }
            std::string msg = where + "unknown key '" + key + "' in [" + section + "]";
            if (best_d <= std::max<std::size_t>(2, key.size() / 3)) msg += "; did you mean '" + best + "'?";
            throw ConfigError(key, msg);
        }
        if (!seen.insert(section + "." + key).second) {
            throw ConfigError(key, where + key + ": set twice in [" + section + "]");
        }
        it->set(value);
    }
    c.validate();
    return c;
}

RunConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path.parent_path());
}

std::string to_text(const RunConfig& config) {
    RunConfig copy = config;
    std::string out, section;
    for (const auto& f : fields(copy)) {
        if (f.section != section) {
            out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get() + "\n";
    }
    return out;
}

ImageShape image_shape(const RunConfig& c) { return {c.data.channels, c.data.height, c.data.width}; }

models::ModelConfig teacher_model(const RunConfig& c, std::size_t which) {
    models::ModelConfig m;
    m.input = image_shape(c);
    m.backbone_blocks = parse_backbone(c.model.backbone);
    m.kernel_size = c.model.kernel_size;
    m.d_face = c.teacher_d_faces.at(which);
    m.dropout_rate = c.teacher.dropout;
    m.heads = {c.model.fec_dim, c.data.num_classes, std::nullopt};
    return m;
}

models::ModelConfig student_model(const RunConfig& c, std::size_t distill_dim) {
    models::ModelConfig m = teacher_model(c, 0);
    m.d_face = c.student_d_face;
    m.dropout_rate = c.student.dropout;
    m.heads.distill = distill_dim;
    return m;
}

namespace {

train::TrainConfig phase_train(const RunConfig& c, const PhaseSection& p, std::uint64_t seed) {
    train::TrainConfig t;
    t.epochs = p.epochs;
    t.steps = p.steps;
    t.batch = {p.batch_triplets, p.batch_labeled, p.batch_unlabeled};
    t.optim = c.optim;
    t.weights = c.loss;
    t.triplet = c.triplet;
    t.seed = seed;
    return t;
}

}  // namespace

train::TrainConfig teacher_train(const RunConfig& c, std::uint64_t seed) { return phase_train(c, c.teacher, seed); }
train::TrainConfig student_train(const RunConfig& c, std::uint64_t seed) { return phase_train(c, c.student, seed); }

data::SynthConfig synth_config(const RunConfig& c) {
    data::SynthConfig s;
    s.shape = image_shape(c);
    s.num_classes = c.data.num_classes;
    s.rendering = {c.data.noise_sigma, c.data.brightness, 0.0};
    s.prototype_seed = c.data.prototype_seed;
    return s;
}

data::SynthConfig transfer_synth_config(const RunConfig& c) {
    data::SynthConfig s = synth_config(c);
    s.num_classes = c.data.transfer_classes;
    s.rendering = {c.data.transfer_noise_sigma, c.data.transfer_brightness, c.data.transfer_contrast};
    return s;
}

}  // namespace fever::cli
