#include "fever/eval/eval.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <random>

#include "fever/errors.hpp"

namespace fever::eval {
namespace {

double sq(const float* a, const float* b, std::size_t d) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) {
        const double t = double(a[i]) - b[i];
        s += t * t;
    }
    return s;
}


template <typename U>
void put(std::ofstream& out, U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get(const std::vector<unsigned char>& buf, std::size_t& pos, const std::string& path) {
    if (buf.size() - pos < sizeof(U)) throw DataError(path + ": truncated feature file");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[pos + i]) << (8 * i);
    pos += sizeof(U);
    return v;
}

// Row weights s_i of the probe objective.
Eigen::VectorXd sample_weights(std::span<const std::size_t> labels, std::size_t k, const ProbeConfig& cfg) {
    const double n = static_cast<double>(labels.size());
    Eigen::VectorXd s(labels.size());
    if (cfg.class_reweighting) {
        const auto w = class_weights(labels, k);
        for (std::size_t i = 0; i < labels.size(); ++i) s[i] = w[labels[i]] / n;
    } else {
        s.setConstant(1.0 / n);
    }
    return s;
}

struct Eval {
    double f;
    Eigen::MatrixXd grad;  // [K, d+1]
};

// theta = [W | b]; xa = [X | 1].
Eval evaluate(const Eigen::MatrixXd& xa, std::span<const std::size_t> labels, const Eigen::VectorXd& s,
              const Eigen::MatrixXd& theta, double inv_c, bool want_grad) {
    const Eigen::Index n = xa.rows(), d = xa.cols() - 1;
    Eigen::MatrixXd logits = xa * theta.transpose();  // [N, K]
    double f = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = logits.row(i).maxCoeff();
        auto row = logits.row(i).array() - m;
        const double lse = std::log(row.exp().sum());
        const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
        f += s[i] * (lse - row(y));
        if (want_grad) {
            logits.row(i) = (row - lse).exp().matrix() * s[i];  // s_i * softmax
            logits(i, y) -= s[i];
        }
    }
    const auto w = theta.leftCols(d);
    f += 0.5 * inv_c * w.squaredNorm();
    Eval e{f, {}};
    if (want_grad) {
        e.grad = logits.transpose() * xa;
        e.grad.leftCols(d) += inv_c * w;
    }
    return e;
}

}  // namespace

Array<float> normalized_rows(const Array<float>& x) {
    Array<float> out = x;
    const std::size_t n = x.dim(0), d = x.dim(1);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += double(x[r * d + c]) * x[r * d + c];
        const double norm = std::sqrt(s);
        const double inv = norm > ndgrad::kNormEpsilon ? 1.0 / norm : 0.0;
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = static_cast<float>(x[r * d + c] * inv);
    }
    return out;
}

SimilarPair predict_pair(const float* a, const float* b, const float* c, std::size_t dim) {
    const double d12 = sq(a, b, dim), d13 = sq(a, c, dim), d23 = sq(b, c, dim);
    if (d12 <= d13 && d12 <= d23) return SimilarPair::p12;
    if (d13 <= d23) return SimilarPair::p13;
    return SimilarPair::p23;
}

double triplet_accuracy(const Array<float>& embeddings, std::span<const SimilarPair> labels) {
    std::size_t n = 0, d = 0;
    if (embeddings.rank() == 2 && embeddings.dim(0) % 3 == 0) {
        n = embeddings.dim(0) / 3;
        d = embeddings.dim(1);
    } else if (embeddings.rank() == 3 && embeddings.dim(1) == 3) {
        n = embeddings.dim(0);
        d = embeddings.dim(2);
    } else {
        throw ShapeError("triplet_accuracy: expected [3n, d] or [n, 3, d], got " + ndgrad::shape_str(embeddings.shape()));
    }
    if (n == 0) throw std::invalid_argument("triplet_accuracy: no triplets");
    if (labels.size() != n) {
        throw ShapeError("triplet_accuracy: " + std::to_string(n) + " triplets but " + std::to_string(labels.size()) +
                         " labels");
    }
    const float* base = embeddings.data().data();
    std::size_t correct = 0;
    for (std::size_t t = 0; t < n; ++t) {
        const float* a = base + 3 * t * d;
        correct += predict_pair(a, a + d, a + 2 * d, d) == labels[t];
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

double triplet_accuracy(const models::Network<float>& net, const data::TripletDataset& ds, bool normalize) {
    const auto fec = net.predict(ds.images).fec;
    return triplet_accuracy(normalize ? normalized_rows(fec) : fec, ds.pairs);
}

double classifier_accuracy(const models::Network<float>& net, const data::LabeledDataset& ds) {
    const auto logits = net.predict(ds.images).logits;
    const std::size_t k = logits.dim(1);
    std::vector<std::size_t> pred(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const float* row = logits.data().data() + i * k;
        pred[i] = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    }
    return accuracy(pred, ds.labels);
}

FeatureFile extract_features(const models::Network<float>& net, const Array<float>& images, FeatureSource source) {
    auto p = net.predict(images);
    return {source == FeatureSource::embedding ? std::move(p.embedding) : std::move(p.fec), std::nullopt};
}

FeatureFile extract_features(const models::Network<float>& net, const data::LabeledDataset& ds,
                             FeatureSource source) {
    FeatureFile f = extract_features(net, ds.images, source);
    f.labels.emplace(ds.labels.begin(), ds.labels.end());
    return f;
}

void write_feature_file(const std::filesystem::path& path, const FeatureFile& f) {
    if (f.rows.rank() != 2) throw ShapeError("write_feature_file: rows must be [count, dims]");
    if (f.labels && f.labels->size() != f.count()) throw ShapeError("write_feature_file: label count differs");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write feature file " + path.string());
    out.write("FEAT", 4);
    put(out, static_cast<std::uint32_t>(f.dims()));
    put(out, static_cast<std::uint32_t>(f.count()));
    put(out, std::uint32_t{1});
    put(out, static_cast<std::uint32_t>(f.labels ? 1 : 0));
    for (std::size_t r = 0; r < f.count(); ++r) {
        for (std::size_t c = 0; c < f.dims(); ++c) put(out, std::bit_cast<std::uint32_t>(f.rows[r * f.dims() + c]));
        if (f.labels) put(out, static_cast<std::uint32_t>((*f.labels)[r]));
    }
    if (!out) throw DataError("write failed for " + path.string());
}

FeatureFile read_feature_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open feature file " + path.string());
    const std::vector<unsigned char> buf{std::istreambuf_iterator<char>(in), {}};
    const std::string p = path.string();
    if (buf.size() < 4 || std::memcmp(buf.data(), "FEAT", 4) != 0) throw DataError(p + ": not a feature file");
    std::size_t pos = 4;
    const auto dims = get<std::uint32_t>(buf, pos, p);
    const auto count = get<std::uint32_t>(buf, pos, p);
    const auto dtype = get<std::uint32_t>(buf, pos, p);
    const auto flags = get<std::uint32_t>(buf, pos, p);
    if (dtype != 1) throw DataError(p + ": unsupported feature dtype " + std::to_string(dtype));
    const bool labeled = flags & 1u;
    const std::size_t row_bytes = 4 * std::size_t{dims} + (labeled ? 4 : 0);
    if (buf.size() - pos != row_bytes * count) {
        throw DataError(p + ": expected " + std::to_string(count) + " rows of " + std::to_string(dims) +
                        " values, file size disagrees");
    }
    FeatureFile f{Array<float>({count, dims}), std::nullopt};
    if (labeled) f.labels.emplace(count);
    for (std::size_t r = 0; r < count; ++r) {
        for (std::size_t c = 0; c < dims; ++c) f.rows[r * dims + c] = std::bit_cast<float>(get<std::uint32_t>(buf, pos, p));
        if (labeled) (*f.labels)[r] = static_cast<std::int32_t>(get<std::uint32_t>(buf, pos, p));
    }
    return f;
}

void write_feature_csv(const std::filesystem::path& path, const FeatureFile& f) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    for (std::size_t c = 0; c < f.dims(); ++c) out << (c ? ",f" : "f") << c;
    if (f.labels) out << ",label";
    out << '\n' << std::setprecision(std::numeric_limits<float>::max_digits10);
    for (std::size_t r = 0; r < f.count(); ++r) {
        for (std::size_t c = 0; c < f.dims(); ++c) out << (c ? "," : "") << f.rows[r * f.dims() + c];
        if (f.labels) out << ',' << (*f.labels)[r];
        out << '\n';
    }
}

std::vector<double> class_weights(std::span<const std::size_t> labels, std::size_t num_classes) {
    if (num_classes == 0) throw std::invalid_argument("class_weights: no classes");
    std::vector<std::size_t> counts(num_classes, 0);
    for (auto y : labels) {
        if (y >= num_classes) throw DataError("class_weights: label " + std::to_string(y) + " out of range");
        ++counts[y];
    }
    std::vector<double> w(num_classes);
    const double n = static_cast<double>(labels.size()), k = static_cast<double>(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (counts[c] == 0) throw DataError("class_weights: class " + std::to_string(c) + " has no samples");
        w[c] = n / (k * static_cast<double>(counts[c]));
    }
    return w;
}

void ProbeConfig::validate() const {
    if (!(C > 0.0)) throw ConfigError("C", "C: must be > 0");
    if (max_iter == 0) throw ConfigError("max_iter", "max_iter: must be > 0");
    if (!(tol > 0.0)) throw ConfigError("tol", "tol: must be > 0");
}

Eigen::MatrixXd to_matrix(const Array<float>& rows) {
    if (rows.rank() != 2) throw ShapeError("to_matrix: expected [n, d], got " + ndgrad::shape_str(rows.shape()));
    Eigen::MatrixXd m(rows.dim(0), rows.dim(1));
    for (std::size_t r = 0; r < rows.dim(0); ++r) {
        for (std::size_t c = 0; c < rows.dim(1); ++c) m(r, c) = rows[r * rows.dim(1) + c];
    }
    return m;
}

double probe_objective(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
                       const Eigen::MatrixXd& weight, const Eigen::VectorXd& bias, const ProbeConfig& config) {
    const auto k = static_cast<std::size_t>(weight.rows());
    Eigen::MatrixXd xa(features.rows(), features.cols() + 1);
    xa << features, Eigen::VectorXd::Ones(features.rows());
    Eigen::MatrixXd theta(weight.rows(), weight.cols() + 1);
    theta << weight, bias;
    return evaluate(xa, labels, sample_weights(labels, k, config), theta, 1.0 / config.C, false).f;
}

LinearProbe fit_linear_probe(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
                             std::size_t num_classes, const ProbeConfig& config) {
    config.validate();
    const Eigen::Index n = features.rows(), d = features.cols();
    if (static_cast<std::size_t>(n) != labels.size()) throw ShapeError("fit_linear_probe: feature/label count differs");
    if (n == 0) throw std::invalid_argument("fit_linear_probe: no samples");
    if (num_classes < 2) throw std::invalid_argument("fit_linear_probe: need at least 2 classes");
    if (!features.allFinite()) throw NumericError("fit_linear_probe: non-finite features");
    for (auto y : labels) {
        if (y >= num_classes) throw DataError("fit_linear_probe: label " + std::to_string(y) + " out of range");
    }
    const Eigen::VectorXd s = sample_weights(labels, num_classes, config);

    LinearProbe probe;
    probe.shift = Eigen::RowVectorXd::Zero(d);
    probe.scale = Eigen::RowVectorXd::Ones(d);
    if (config.standardize) {
        // Weighted by s, which sums to 1, so the statistics inherit the class balance.
        probe.shift = s.transpose() * features;
        const Eigen::MatrixXd centered = features.rowwise() - probe.shift;
        const Eigen::RowVectorXd var = s.transpose() * centered.array().square().matrix();
        probe.scale = var.array().sqrt().max(1e-12).matrix();
    }
    Eigen::MatrixXd xa(n, d + 1);
    xa << ((features.rowwise() - probe.shift).array().rowwise() / probe.scale.array()).matrix(),
        Eigen::VectorXd::Ones(n);

    const auto k = static_cast<Eigen::Index>(num_classes);
    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(k, d + 1);
    if (config.init_seed) {
        std::mt19937_64 rng(*config.init_seed);
        std::normal_distribution<double> g(0.0, 1.0);
        for (Eigen::Index i = 0; i < theta.size(); ++i) theta.data()[i] = g(rng);
    }
    // Adding one vector to every class row changes only the regulariser, whose minimum
    // along that direction is zero class-mean; gradient steps preserve the mean up to the
    // 1/C shrinkage. Starting at zero mean removes that slow direction and pins the
    // otherwise free mean of the bias, so the optimum is unique.
    theta.rowwise() -= theta.colwise().mean();
    const double inv_c = 1.0 / config.C;
    Eval cur = evaluate(xa, labels, s, theta, inv_c, true);
    probe.objective_trace.push_back(cur.f);
    Eigen::MatrixXd prev_theta, prev_grad;
    double step = 1.0;
    for (probe.iterations = 0; probe.iterations < config.max_iter; ++probe.iterations) {
        const double gnorm2 = cur.grad.squaredNorm();
        if (std::sqrt(gnorm2) <= config.tol) break;
        if (prev_theta.size()) {
            const Eigen::MatrixXd ds = theta - prev_theta, dg = cur.grad - prev_grad;
            const double sy = (ds.array() * dg.array()).sum();
            if (sy > 0) step = std::clamp(ds.squaredNorm() / sy, 1e-10, 1e10);
        }
        bool accepted = false;
        for (int halvings = 0; halvings < 60; ++halvings, step *= 0.5) {
            const Eigen::MatrixXd trial = theta - step * cur.grad;
            const Eval next = evaluate(xa, labels, s, trial, inv_c, true);
            if (std::isfinite(next.f) && next.f <= cur.f - 1e-4 * step * gnorm2) {
                prev_theta = std::move(theta);
                prev_grad = std::move(cur.grad);
                theta = trial;
                cur = next;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;  // no descent at machine precision
        probe.objective_trace.push_back(cur.f);
    }
    probe.grad_norm = cur.grad.norm();
    probe.converged = probe.grad_norm <= config.tol;
    probe.weight = theta.leftCols(d);
    probe.bias = theta.col(d);
    return probe;
}

std::vector<std::size_t> predict(const LinearProbe& probe, const Eigen::MatrixXd& features) {
    if (features.cols() != probe.weight.cols()) throw ShapeError("predict: feature dimension differs from the probe");
    const Eigen::MatrixXd x = ((features.rowwise() - probe.shift).array().rowwise() / probe.scale.array()).matrix();
    const Eigen::MatrixXd logits = (x * probe.weight.transpose()).rowwise() + probe.bias.transpose();
    std::vector<std::size_t> out(static_cast<std::size_t>(features.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index arg;
        logits.row(i).maxCoeff(&arg);
        out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(arg);
    }
    return out;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
    if (predicted.size() != labels.size() || labels.empty()) {
        throw std::invalid_argument("accuracy: sizes differ or are empty");
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace fever::eval
