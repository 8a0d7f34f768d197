#include "visteer/io.hpp"

#include <png.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "visteer/image_ops.hpp"

namespace visteer {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr char kRawMagic[8] = {'V', 'S', 'T', 'R', 'A', 'W', '0', '1'};
constexpr const char* kCheckpointMagic = "visteer-checkpoint 1";

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return f;
}

void write_doubles(std::ostream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& in, std::vector<double>& v, const std::filesystem::path& path) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw std::runtime_error(path.string() + ": truncated payload");
}

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image) {
    require_image(image, "write_png");
    if (image.dim(2) != 3) throw ShapeError("write_png: expected 3 channels");
    const std::size_t h = image.dim(0), w = image.dim(1);
    FilePtr f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("write_png: libpng init failed");
    }
    std::vector<png_byte> rows(h * w * 3);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i] = static_cast<png_byte>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
    }
    std::vector<png_bytep> ptrs(h);
    for (std::size_t r = 0; r < h; ++r) ptrs[r] = rows.data() + r * w * 3;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("write_png: libpng error writing " + path.string());
    }
    png_init_io(png, f.get());
    // One fixed encoder setup so output bytes are reproducible.
    png_set_compression_level(png, 9);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::filesystem::path& path) {
    FilePtr f = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("read_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("read_png: " + path.string() + " is not a readable PNG");
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_gray_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    if (rowbytes != w * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("read_png: unsupported pixel layout in " + path.string());
    }
    std::vector<png_byte> rows(h * rowbytes);
    std::vector<png_bytep> ptrs(h);
    for (std::size_t r = 0; r < h; ++r) ptrs[r] = rows.data() + r * rowbytes;
    png_read_image(png, ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    Tensor img({h, w, 3});
    for (std::size_t i = 0; i < rows.size(); ++i) img[i] = rows[i] / 255.0;
    return img;
}

void write_raw_image(const std::filesystem::path& path, const Tensor& image) {
    require_image(image, "write_raw_image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(kRawMagic, sizeof kRawMagic);
    for (std::size_t i = 0; i < 3; ++i) {
        const std::uint64_t d = image.dim(i);
        out.write(reinterpret_cast<const char*>(&d), sizeof d);
    }
    write_doubles(out, image.values());
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor read_raw_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kRawMagic, sizeof magic) != 0) {
        throw std::runtime_error(path.string() + ": not a raw image file");
    }
    std::uint64_t dims[3];
    in.read(reinterpret_cast<char*>(dims), sizeof dims);
    if (!in || dims[0] == 0 || dims[1] == 0 || dims[2] == 0 || dims[0] * dims[1] * dims[2] > (1u << 28)) {
        throw std::runtime_error(path.string() + ": bad raw image header");
    }
    Tensor img({dims[0], dims[1], dims[2]});
    read_doubles(in, img.values(), path);
    return img;
}

Tensor load_image(const std::filesystem::path& path) {
    if (path.extension() == ".png") {
        auto raw = path;
        raw.replace_extension(".raw");
        return std::filesystem::exists(raw) ? read_raw_image(raw) : read_png(path);
    }
    return read_raw_image(path);
}

void save_model(const std::filesystem::path& path, const ToyVLM& model) {
    std::vector<std::pair<std::string, const Tensor*>> entries;
    const auto params = model.parameters();
    for (const auto& [name, t] : params) entries.emplace_back(name, &t);
    std::vector<Tensor> extra;
    extra.reserve(model.planted().size() * 3);
    for (std::size_t i = 0; i < model.planted().size(); ++i) {
        const auto& p = model.planted()[i];
        const std::string base = "planted." + std::to_string(i) + ".";
        extra.push_back(Tensor({4}, {static_cast<double>(p.layer), p.coupling, p.write_scale, 0.0}));
        entries.emplace_back(base + "settings", &extra.back());
        extra.push_back(p.direction);
        entries.emplace_back(base + "direction", &extra.back());
        Tensor pol({p.polarity.size()});
        for (std::size_t j = 0; j < p.polarity.size(); ++j) pol[j] = p.polarity[j];
        extra.push_back(std::move(pol));
        entries.emplace_back(base + "polarity", &extra.back());
    }
    std::ostringstream header;
    header << kCheckpointMagic << '\n' << "model " << model.config().name << '\n';
    std::size_t offset = 0;
    for (const auto& [name, t] : entries) {
        header << name << ' ';
        for (std::size_t i = 0; i < t->rank(); ++i) header << (i ? "x" : "") << t->dim(i);
        header << ' ' << offset << '\n';
        offset += t->size();
    }
    header << '\n';
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << header.str();
    for (const auto& e : entries) write_doubles(out, e.second->values());
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

ToyVLM load_model(const std::filesystem::path& path, const ModelConfig& config) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kCheckpointMagic) {
        throw std::runtime_error(path.string() + ": not a model checkpoint");
    }
    std::getline(in, line);  // model name
    struct Entry {
        std::string name;
        Shape shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    while (std::getline(in, line) && !line.empty()) {
        std::istringstream ls(line);
        Entry e;
        std::string dims;
        if (!(ls >> e.name >> dims >> e.offset)) throw std::runtime_error(path.string() + ": bad header line '" + line + "'");
        std::istringstream ds(dims);
        std::string tok;
        while (std::getline(ds, tok, 'x')) e.shape.push_back(std::stoull(tok));
        entries.push_back(std::move(e));
    }
    std::vector<double> payload;
    {
        std::ostringstream rest;
        rest << in.rdbuf();
        const std::string bytes = rest.str();
        if (bytes.size() % sizeof(double) != 0) throw std::runtime_error(path.string() + ": ragged payload");
        payload.resize(bytes.size() / sizeof(double));
        std::memcpy(payload.data(), bytes.data(), bytes.size());
    }
    std::map<std::string, Tensor> params;
    for (const auto& e : entries) {
        std::size_t n = 1;
        for (std::size_t d : e.shape) n *= d;
        if (e.offset + n > payload.size()) throw std::runtime_error(path.string() + ": entry '" + e.name + "' past end");
        params.emplace(e.name, Tensor(e.shape, std::vector<double>(payload.begin() + static_cast<std::ptrdiff_t>(e.offset),
                                                                   payload.begin() + static_cast<std::ptrdiff_t>(e.offset + n))));
    }
    std::vector<std::tuple<Tensor, Tensor, Tensor>> planted;
    for (std::size_t i = 0;; ++i) {
        const std::string base = "planted." + std::to_string(i) + ".";
        auto s = params.find(base + "settings");
        if (s == params.end()) break;
        planted.emplace_back(s->second, params.at(base + "direction"), params.at(base + "polarity"));
        params.erase(base + "settings");
        params.erase(base + "direction");
        params.erase(base + "polarity");
    }
    ToyVLM m = ToyVLM::from_parameters(config, std::move(params));
    for (const auto& [settings, dir, pol] : planted) {
        std::vector<int> polarity(pol.size());
        for (std::size_t j = 0; j < pol.size(); ++j) polarity[j] = static_cast<int>(pol[j]);
        m = m.with_planted(static_cast<std::size_t>(settings[0]), dir, settings[1], settings[2], std::move(polarity));
    }
    return m;
}

void save_vectors(const std::filesystem::path& manifest, const SteeringVectorSet& vectors, const VectorFileInfo& info) {
    auto payload = manifest;
    payload.replace_extension(".bin");
    nlohmann::ordered_json j;
    j["format"] = "visteer-vectors 1";
    j["model"] = info.model;
    j["behavior"] = info.behavior;
    j["hidden_dim"] = vectors.hidden_dim;
    j["pair_count"] = vectors.pair_count;
    std::vector<std::size_t> layers;
    for (const auto& kv : vectors.vectors) layers.push_back(kv.first);
    j["layers"] = layers;
    j["multiplier_pos"] = info.config.multiplier_pos;
    j["multiplier_neg"] = info.config.multiplier_neg;
    j["token_positions"] = info.config.token_positions;
    j["layer_weights"] = info.config.layer_weights;
    j["payload"] = payload.filename().string();
    std::ofstream out(payload, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + payload.string());
    for (const auto& kv : vectors.vectors) write_doubles(out, kv.second.values());
    out.close();
    std::ofstream m(manifest);
    if (!m) throw std::runtime_error("cannot write " + manifest.string());
    m << j.dump(2) << '\n';
}

SteeringVectorSet load_vectors(const std::filesystem::path& manifest, VectorFileInfo* info) {
    std::ifstream m(manifest);
    if (!m) throw std::runtime_error("cannot read " + manifest.string());
    const auto j = nlohmann::json::parse(m);
    if (j.at("format") != "visteer-vectors 1") throw std::runtime_error(manifest.string() + ": unknown vector format");
    SteeringVectorSet v;
    v.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    v.pair_count = j.at("pair_count").get<std::size_t>();
    const auto layers = j.at("layers").get<std::vector<std::size_t>>();
    const auto payload = manifest.parent_path() / j.at("payload").get<std::string>();
    std::ifstream in(payload, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + payload.string());
    for (std::size_t l : layers) {
        Tensor t({v.hidden_dim});
        read_doubles(in, t.values(), payload);
        v.vectors.emplace(l, std::move(t));
    }
    if (info) {
        info->model = j.at("model").get<std::string>();
        info->behavior = j.at("behavior").get<std::string>();
        info->config.layers = layers;
        info->config.multiplier_pos = j.at("multiplier_pos").get<double>();
        info->config.multiplier_neg = j.at("multiplier_neg").get<double>();
        info->config.token_positions = j.at("token_positions").get<std::size_t>();
        info->config.layer_weights = j.at("layer_weights").get<std::vector<double>>();
    }
    return v;
}

}  // namespace visteer
