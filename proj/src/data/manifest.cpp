#include "fever/data/manifest.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <memory>
#include <string_view>

#include "fever/errors.hpp"

namespace fever::data {
namespace fs = std::filesystem;

Array<float> read_png(const fs::path& path, std::size_t channels) {
    if (channels != 1 && channels != 3) throw std::invalid_argument("read_png: channels must be 1 or 3");
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw DataError("cannot read image " + path.string() + ": " + image.message);
    }
    image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<png_byte> pixels(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
        png_image_free(&image);
        throw DataError("cannot decode image " + path.string() + ": " + image.message);
    }
    const std::size_t h = image.height, w = image.width;
    Array<float> out({channels, h, w});
    auto dst = out.data();
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                dst[(c * h + y) * w + x] = static_cast<float>(pixels[(y * w + x) * channels + c]) / 255.0f;
            }
        }
    }
    return out;
}

void write_png(const fs::path& path, const float* chw, const ImageShape& shape) {
    if (shape.channels != 1 && shape.channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
    const std::size_t c_n = shape.channels, h = shape.height, w = shape.width;
    std::vector<png_byte> pixels(c_n * h * w);
    for (std::size_t c = 0; c < c_n; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const float v = std::clamp(chw[(c * h + y) * w + x], 0.0f, 1.0f);
                pixels[(y * w + x) * c_n + c] = static_cast<png_byte>(std::lround(v * 255.0f));
            }
        }
    }
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = c_n == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr)) {
        throw DataError("cannot write image " + path.string() + ": " + image.message);
    }
}

namespace {

struct Row {
    std::size_t line;
    std::vector<std::string> fields;
};

std::string_view trim(std::string_view s) {
    const auto ws = " \t\r";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

std::vector<std::string> split(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.emplace_back(trim(line.substr(start, comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

class Manifest {
public:
    Manifest(const fs::path& path, const std::vector<std::string>& header) : path_(path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open manifest " + path.string());
        std::string line;
        std::size_t number = 0;
        bool seen_header = false;
        while (std::getline(in, line)) {
            ++number;
            if (trim(line).empty()) continue;
            auto fields = split(line);
            if (fields.size() != header.size()) {
                throw error(number, "expected " + std::to_string(header.size()) + " fields, got " +
                                        std::to_string(fields.size()));
            }
            if (!seen_header) {
                if (fields != header) throw error(number, "header must be " + join(header));
                seen_header = true;
                continue;
            }
            rows_.push_back({number, std::move(fields)});
        }
        if (!seen_header) throw DataError(path.string() + ": missing header line");
        if (rows_.empty()) throw DataError(path.string() + ": no records");
    }

    const std::vector<Row>& rows() const { return rows_; }

    DataError error(std::size_t line, const std::string& what) const {
        return DataError(path_.string() + ":" + std::to_string(line) + ": " + what);
    }

    long integer(const Row& row, std::size_t field) const {
        const std::string& s = row.fields[field];
        long v = 0;
        const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || end != s.data() + s.size()) throw error(row.line, "not an integer: '" + s + "'");
        return v;
    }

    // Decodes the image in `field` into the next slot of `images`, checking its shape.
    void image(const Row& row, std::size_t field, std::size_t channels, std::vector<Array<float>>& images,
               ImageShape& shape) const {
        const std::string& rel = row.fields[field];
        if (rel.empty()) throw error(row.line, "empty image path");
        Array<float> img;
        try {
            img = read_png(path_.parent_path() / rel, channels);
        } catch (const DataError& e) {
            throw error(row.line, e.what());
        }
        const ImageShape s{img.dim(0), img.dim(1), img.dim(2)};
        if (images.empty()) {
            shape = s;
        } else if (!(s == shape)) {
            throw error(row.line, rel + " is " + s.str() + ", expected " + shape.str());
        }
        images.push_back(std::move(img));
    }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s;
        for (const auto& f : v) s += (s.empty() ? "" : ",") + f;
        return s;
    }

    fs::path path_;
    std::vector<Row> rows_;
};

Array<float> stack(const std::vector<Array<float>>& images, const ImageShape& shape) {
    Array<float> out({images.size(), shape.channels, shape.height, shape.width});
    auto dst = out.data().begin();
    for (const auto& img : images) dst = std::copy(img.data().begin(), img.data().end(), dst);
    return out;
}

void prepare_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

std::ofstream open_csv(const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest " + path.string());
    return out;
}

}  // namespace

LabeledDataset load_labeled_manifest(const fs::path& path, std::size_t num_classes, std::size_t channels) {
    const Manifest m(path, {"path", "label"});
    LabeledDataset ds;
    ds.num_classes = num_classes;
    std::vector<Array<float>> images;
    for (const auto& row : m.rows()) {
        const long label = m.integer(row, 1);
        if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
            throw m.error(row.line, "label " + std::to_string(label) + " out of range [0, " +
                                        std::to_string(num_classes) + ")");
        }
        m.image(row, 0, channels, images, ds.shape);
        ds.labels.push_back(static_cast<std::size_t>(label));
    }
    ds.images = stack(images, ds.shape);
    return ds;
}

TripletDataset load_triplet_manifest(const fs::path& path, std::size_t channels) {
    const Manifest m(path, {"path1", "path2", "path3", "similar_pair"});
    TripletDataset ds;
    std::vector<Array<float>> images;
    for (const auto& row : m.rows()) {
        const long code = m.integer(row, 3);
        SimilarPair pair;
        try {
            pair = pair_from_code(static_cast<int>(code));
        } catch (const std::invalid_argument&) {
            throw m.error(row.line, "similar_pair " + std::to_string(code) + " is not one of 12, 13, 23");
        }
        for (std::size_t k = 0; k < 3; ++k) m.image(row, k, channels, images, ds.shape);
        ds.pairs.push_back(pair);
    }
    ds.images = stack(images, ds.shape);
    return ds;
}

UnlabeledDataset load_unlabeled_manifest(const fs::path& path, std::size_t channels) {
    const Manifest m(path, {"path"});
    UnlabeledDataset ds;
    std::vector<Array<float>> images;
    for (const auto& row : m.rows()) m.image(row, 0, channels, images, ds.shape);
    ds.images = stack(images, ds.shape);
    return ds;
}

AnyDataset load_manifest(const fs::path& path, ManifestKind kind) {
    switch (kind) {
        case ManifestKind::labeled: return load_labeled_manifest(path);
        case ManifestKind::triplet: return load_triplet_manifest(path);
        case ManifestKind::unlabeled: return load_unlabeled_manifest(path);
    }
    throw std::invalid_argument("unknown manifest kind");
}

fs::path write_manifest(const fs::path& dir, const std::string& stem, const LabeledDataset& ds) {
    prepare_dir(dir / stem);
    const fs::path csv = dir / (stem + ".csv");
    auto out = open_csv(csv);
    out << "path,label\n";
    const std::size_t per = ds.shape.size();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string rel = stem + "/" + std::to_string(i) + ".png";
        write_png(dir / rel, ds.images.data().data() + i * per, ds.shape);
        out << rel << ',' << ds.labels[i] << '\n';
    }
    return csv;
}

fs::path write_manifest(const fs::path& dir, const std::string& stem, const TripletDataset& ds) {
    prepare_dir(dir / stem);
    const fs::path csv = dir / (stem + ".csv");
    auto out = open_csv(csv);
    out << "path1,path2,path3,similar_pair\n";
    const std::size_t per = ds.shape.size();
    for (std::size_t t = 0; t < ds.size(); ++t) {
        for (std::size_t k = 0; k < 3; ++k) {
            const std::string rel = stem + "/" + std::to_string(t) + "_" + std::to_string(k + 1) + ".png";
            write_png(dir / rel, ds.images.data().data() + (3 * t + k) * per, ds.shape);
            out << rel << ',';
        }
        out << pair_code(ds.pairs[t]) << '\n';
    }
    return csv;
}

fs::path write_manifest(const fs::path& dir, const std::string& stem, const UnlabeledDataset& ds) {
    prepare_dir(dir / stem);
    const fs::path csv = dir / (stem + ".csv");
    auto out = open_csv(csv);
    out << "path\n";
    const std::size_t per = ds.shape.size();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string rel = stem + "/" + std::to_string(i) + ".png";
        write_png(dir / rel, ds.images.data().data() + i * per, ds.shape);
        out << rel << '\n';
    }
    return csv;
}

}  // namespace fever::data
