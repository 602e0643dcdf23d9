// SPDX-License-Identifier: Apache-2.0
#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mcvt/dataset.hpp"
#include "mcvt/tensor.hpp"

namespace mcvt::data {

namespace fs = std::filesystem;

namespace {

constexpr int kManifestVersion = 1;

struct Image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  int bit_depth = 0;
  int color_type = 0;
  std::vector<std::uint8_t> bytes;  // rows top to bottom, 16-bit samples big-endian
};

struct File {
  std::FILE* fp = nullptr;
  ~File() {
    if (fp) std::fclose(fp);
  }
};

void write_png(const fs::path& path, const Image& image) {
  File file;
  file.fp = std::fopen(path.c_str(), "wb");
  if (!file.fp) throw FormatError(path, "cannot open for writing");
  const int channels = image.color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  const std::size_t stride = static_cast<std::size_t>(image.width) * channels * (image.bit_depth / 8);
  std::vector<png_bytep> rows(image.height);
  for (std::uint32_t r = 0; r < image.height; ++r) rows[r] = const_cast<png_bytep>(image.bytes.data() + r * stride);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw FormatError(path, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError(path, "PNG encoding failed");
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, image.width, image.height, image.bit_depth, image.color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(file.fp) != 0) throw FormatError(path, "write failed");
}

Image read_png(const fs::path& path) {
  File file;
  file.fp = std::fopen(path.c_str(), "rb");
  if (!file.fp) throw FormatError(path, "missing or unreadable image");
  png_byte signature[8];
  if (std::fread(signature, 1, 8, file.fp) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
    throw FormatError(path, "not a PNG file");
  }
  Image image;
  std::vector<png_bytep> rows;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw FormatError(path, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError(path, "corrupt PNG data");
  }
  png_init_io(png, file.fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  image.width = png_get_image_width(png, info);
  image.height = png_get_image_height(png, info);
  image.bit_depth = png_get_bit_depth(png, info);
  image.color_type = png_get_color_type(png, info);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  image.bytes.resize(stride * image.height);
  rows.resize(image.height);
  for (std::uint32_t r = 0; r < image.height; ++r) rows[r] = image.bytes.data() + r * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

std::string view_file(int j, const char* kind) { return "view" + std::to_string(j) + "_" + kind + ".png"; }

void check_sample_id(const fs::path& manifest, const std::string& id) {
  if (id.empty() || id == "." || id == ".." || id.find_first_of("/\\") != std::string::npos) {
    throw FormatError(manifest, "invalid sample id '" + id + "'");
  }
}

View load_view(const fs::path& dir, int j, int size, const Camera& camera) {
  View view;
  view.size = size;
  view.camera = camera;
  const auto pixels = static_cast<std::size_t>(size) * size;

  const auto rgb_path = dir / view_file(j, "rgb");
  const auto rgb = read_png(rgb_path);
  if (rgb.bit_depth != 8 || rgb.color_type != PNG_COLOR_TYPE_RGB) {
    throw FormatError(rgb_path, "expected 8-bit RGB");
  }
  if (rgb.width != static_cast<std::uint32_t>(size) || rgb.height != static_cast<std::uint32_t>(size)) {
    throw FormatError(rgb_path, "expected " + std::to_string(size) + "x" + std::to_string(size) + " pixels, got " +
                                    std::to_string(rgb.width) + "x" + std::to_string(rgb.height));
  }
  view.rgb = rgb.bytes;

  const auto depth_path = dir / view_file(j, "depth");
  const auto depth = read_png(depth_path);
  if (depth.bit_depth != 16 || depth.color_type != PNG_COLOR_TYPE_GRAY) {
    throw FormatError(depth_path, "expected 16-bit grayscale");
  }
  if (depth.width != static_cast<std::uint32_t>(size) || depth.height != static_cast<std::uint32_t>(size)) {
    throw FormatError(depth_path, "expected " + std::to_string(size) + "x" + std::to_string(size) + " pixels, got " +
                                      std::to_string(depth.width) + "x" + std::to_string(depth.height));
  }
  view.depth.resize(pixels);
  for (std::size_t i = 0; i < pixels; ++i) {
    view.depth[i] = dequantize_depth(static_cast<std::uint16_t>(depth.bytes[2 * i] << 8 | depth.bytes[2 * i + 1]));
  }
  return view;
}

template <typename V>
V field(const nlohmann::json& object, const char* key, const fs::path& path, const std::string& where) {
  if (!object.is_object() || !object.contains(key)) throw FormatError(path, where + ": missing '" + key + "'");
  try {
    return object.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path, where + "." + key + ": " + e.what());
  }
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& root) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw FormatError(root, "cannot create directory: " + ec.message());

  nlohmann::json entries = nlohmann::json::array();
  std::set<std::string> ids;
  for (const auto& sample : dataset.samples) {
    check_sample_id(root / "manifest.json", sample.id);
    if (!ids.insert(sample.id).second) throw FormatError(root, "duplicate sample id '" + sample.id + "'");
    const auto dir = root / sample.id;
    fs::create_directories(dir, ec);
    if (ec) throw FormatError(dir, "cannot create directory: " + ec.message());
    nlohmann::json views = nlohmann::json::array();
    for (std::size_t j = 0; j < sample.views.size(); ++j) {
      const auto& view = sample.views[j];
      const auto pixels = static_cast<std::size_t>(view.size) * view.size;
      if (view.size != dataset.image_size || view.rgb.size() != pixels * 3 || view.depth.size() != pixels) {
        throw ContractError("save_dataset: view " + std::to_string(j) + " of '" + sample.id +
                            "' does not match the dataset image size");
      }
      Image rgb{static_cast<std::uint32_t>(view.size), static_cast<std::uint32_t>(view.size), 8, PNG_COLOR_TYPE_RGB,
                view.rgb};
      write_png(dir / view_file(static_cast<int>(j), "rgb"), rgb);
      Image depth{static_cast<std::uint32_t>(view.size), static_cast<std::uint32_t>(view.size), 16,
                  PNG_COLOR_TYPE_GRAY, std::vector<std::uint8_t>(pixels * 2)};
      for (std::size_t i = 0; i < pixels; ++i) {
        const auto q = quantize_depth(view.depth[i]);
        depth.bytes[2 * i] = static_cast<std::uint8_t>(q >> 8);
        depth.bytes[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
      }
      write_png(dir / view_file(static_cast<int>(j), "depth"), depth);
      views.push_back({{"azimuth", view.camera.azimuth}, {"elevation", view.camera.elevation}});
    }
    entries.push_back({{"id", sample.id}, {"label", sample.label}, {"views", views}});
  }
  const nlohmann::json manifest{{"version", kManifestVersion},
                                {"classes", dataset.classes},
                                {"image_size", dataset.image_size},
                                {"rig", to_json(dataset.rig)},
                                {"entries", entries}};
  const auto path = root / "manifest.json";
  const auto tmp = root / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
    if (!out) throw FormatError(tmp, "write failed");
  }
  fs::rename(tmp, path, ec);
  if (ec) throw FormatError(path, "cannot rename manifest: " + ec.message());
}

Dataset load_dataset(const fs::path& root) {
  const auto path = root / "manifest.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, "missing or unreadable manifest");
  std::stringstream text;
  text << in.rdbuf();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path, std::string("malformed JSON: ") + e.what());
  }
  if (!manifest.is_object()) throw FormatError(path, "manifest must be a JSON object");
  for (const auto& item : manifest.items()) {
    static const std::set<std::string> known{"version", "classes", "image_size", "rig", "entries"};
    if (!known.count(item.key())) throw FormatError(path, "unknown key '" + item.key() + "'");
  }
  const auto version = field<int>(manifest, "version", path, "manifest");
  if (version != kManifestVersion) throw FormatError(path, "unsupported version " + std::to_string(version));

  Dataset dataset;
  dataset.classes = field<std::vector<std::string>>(manifest, "classes", path, "manifest");
  dataset.image_size = field<int>(manifest, "image_size", path, "manifest");
  if (dataset.image_size < 1) throw FormatError(path, "image_size must be positive");
  try {
    dataset.rig = rig_from_json(field<nlohmann::json>(manifest, "rig", path, "manifest"));
  } catch (const ConfigError& e) {
    throw FormatError(path, e.what());
  }
  const auto entries = field<nlohmann::json>(manifest, "entries", path, "manifest");
  if (!entries.is_array()) throw FormatError(path, "entries must be an array");

  std::set<std::string> ids;
  for (std::size_t e = 0; e < entries.size(); ++e) {
    const auto where = "entries[" + std::to_string(e) + "]";
    const auto& entry = entries[e];
    Sample sample;
    sample.id = field<std::string>(entry, "id", path, where);
    check_sample_id(path, sample.id);
    if (!ids.insert(sample.id).second) throw FormatError(path, where + ": duplicate id '" + sample.id + "'");
    sample.label = field<int>(entry, "label", path, where);
    if (sample.label < 0 || sample.label >= static_cast<int>(dataset.classes.size())) {
      throw FormatError(path, where + ": label " + std::to_string(sample.label) + " out of range");
    }
    const auto views = field<nlohmann::json>(entry, "views", path, where);
    if (!views.is_array() || views.size() != static_cast<std::size_t>(dataset.rig.count)) {
      throw FormatError(path, where + ": expected " + std::to_string(dataset.rig.count) + " views");
    }
    for (std::size_t j = 0; j < views.size(); ++j) {
      const auto view_where = where + ".views[" + std::to_string(j) + "]";
      const Camera camera{field<double>(views[j], "azimuth", path, view_where),
                          field<double>(views[j], "elevation", path, view_where)};
      sample.views.push_back(load_view(root / sample.id, static_cast<int>(j), dataset.image_size, camera));
    }
    dataset.samples.push_back(std::move(sample));
  }
  return dataset;
}

}  // namespace mcvt::data
