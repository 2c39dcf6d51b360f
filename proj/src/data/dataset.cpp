#include "data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "core/error.hpp"
#include "core/rng.hpp"
#include "data/png_io.hpp"

namespace ssgan {

namespace {

constexpr double kPi = 3.14159265358979323846;

// splitmix64 finalizer; chains (seed, class, index) into one image seed so a
// rendered image never depends on how many others exist.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

const char* const kShapeNames[] = {"disc", "square", "triangle", "cross",
                                   "ring", "star",   "bar",      "diamond"};
constexpr std::size_t kShapeCount = 8;

// Membership test in shape-local coordinates, where the shape is centered at
// the origin and fits inside the unit circle.
bool inside_shape(std::size_t shape, double x, double y) {
  switch (shape) {
    case 0:  // disc
      return x * x + y * y <= 1.0;
    case 1:  // square
      return std::max(std::abs(x), std::abs(y)) <= 0.8;
    case 2: {  // triangle with vertices (0,1), (-s,-1/2), (s,-1/2)
      const double s = std::sqrt(3.0) / 2.0;
      auto side = [x, y](double ax, double ay, double bx, double by) {
        return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
      };
      return side(0, 1, -s, -0.5) >= 0 && side(-s, -0.5, s, -0.5) >= 0 && side(s, -0.5, 0, 1) >= 0;
    }
    case 3:  // cross
      return (std::abs(x) <= 0.3 && std::abs(y) <= 1.0) ||
             (std::abs(y) <= 0.3 && std::abs(x) <= 1.0);
    case 4: {  // ring
      const double r2 = x * x + y * y;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 5: {  // five-pointed star: radius limit oscillates with the angle
      const double r = std::sqrt(x * x + y * y);
      const double a = std::atan2(y, x);
      const double u = a * 5.0 / (2.0 * kPi);
      const double tri = 2.0 * std::abs(u - std::floor(u + 0.5));  // 1 at spikes, 0 between
      return r <= 0.5 + 0.5 * tri;
    }
    case 6:  // bar
      return std::abs(x) <= 1.0 && std::abs(y) <= 0.3;
    default:  // diamond
      return std::abs(x) + std::abs(y) <= 1.0;
  }
}

std::vector<std::uint8_t> render_image(std::size_t shape, std::size_t size, std::size_t channels,
                                       Rng& rng) {
  const double cx = rng.uniform(0.35, 0.65);
  const double cy = rng.uniform(0.35, 0.65);
  const double scale = rng.uniform(0.20, 0.33);
  // Rotation stays within +-20 degrees so orientation-defined classes (bar,
  // square vs. diamond) remain distinct.
  const double theta = rng.uniform(-0.35, 0.35);
  const double bg = rng.uniform(0.08, 0.30);
  const double fg = rng.uniform(0.65, 0.95);
  // Random tints keep color uninformative about the class.
  double bg_tint[3] = {1, 1, 1}, fg_tint[3] = {1, 1, 1};
  if (channels == 3) {
    for (double& t : bg_tint) t = rng.uniform(0.7, 1.0);
    for (double& t : fg_tint) t = rng.uniform(0.7, 1.0);
  }

  const double cos_t = std::cos(theta), sin_t = std::sin(theta);
  std::vector<std::uint8_t> out(size * size * channels);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c) {
      int hits = 0;
      for (int sr = 0; sr < 3; ++sr)
        for (int sc = 0; sc < 3; ++sc) {
          const double v = (static_cast<double>(r) + (sr + 0.5) / 3.0) / static_cast<double>(size);
          const double u = (static_cast<double>(c) + (sc + 0.5) / 3.0) / static_cast<double>(size);
          const double dx = u - cx, dy = v - cy;
          const double lx = (dx * cos_t + dy * sin_t) / scale;
          const double ly = (-dx * sin_t + dy * cos_t) / scale;
          if (inside_shape(shape, lx, ly)) ++hits;
        }
      const double coverage = hits / 9.0;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double value = bg * bg_tint[ch] + coverage * (fg * fg_tint[ch] - bg * bg_tint[ch]);
        const long byte = std::lround(255.0 * value);
        out[(r * size + c) * channels + ch] =
            static_cast<std::uint8_t>(std::clamp(byte, 0L, 255L));
      }
    }
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

DatasetManifest load_manifest(const std::string& root, std::size_t image_size,
                              std::size_t channels) {
  const std::string csv = root + "/manifest.csv";
  std::ifstream in(csv);
  require(in.good(), ErrCode::io, "load_manifest: cannot open " + csv);

  std::string line;
  std::getline(in, line);
  strip_cr(line);
  require(line == "path,class_id,split", ErrCode::corrupt,
          "load_manifest: bad header \"" + line + "\" in " + csv);

  DatasetManifest manifest;
  manifest.root = root;
  manifest.image_size = image_size;
  manifest.channels = channels;

  std::set<int> train_ids, test_ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
    require(c1 != std::string::npos && c2 != std::string::npos &&
                line.find(',', c2 + 1) == std::string::npos,
            ErrCode::corrupt,
            "load_manifest: line " + std::to_string(line_no) + " needs 3 fields: " + line);
    ManifestRow row;
    row.path = line.substr(0, c1);
    require(!row.path.empty(), ErrCode::corrupt,
            "load_manifest: empty path on line " + std::to_string(line_no));
    const std::string id_str = line.substr(c1 + 1, c2 - c1 - 1);
    try {
      std::size_t used = 0;
      row.class_id = std::stoi(id_str, &used);
      require(used == id_str.size(), ErrCode::corrupt, "trailing characters");
    } catch (const Error&) {
      raise(ErrCode::corrupt,
            "load_manifest: bad class id \"" + id_str + "\" on line " + std::to_string(line_no));
    } catch (const std::exception&) {
      raise(ErrCode::corrupt,
            "load_manifest: bad class id \"" + id_str + "\" on line " + std::to_string(line_no));
    }
    const std::string split_str = line.substr(c2 + 1);
    if (split_str == "train") {
      row.split = Split::train;
      train_ids.insert(row.class_id);
    } else if (split_str == "test") {
      row.split = Split::test;
      test_ids.insert(row.class_id);
    } else {
      raise(ErrCode::corrupt, "load_manifest: split must be train or test, got \"" + split_str +
                                  "\" on line " + std::to_string(line_no));
    }
    manifest.rows.push_back(std::move(row));
  }
  require(!manifest.rows.empty(), ErrCode::corrupt, "load_manifest: no rows in " + csv);

  for (int id : train_ids)
    require(test_ids.count(id) == 0, ErrCode::corrupt,
            "load_manifest: class id " + std::to_string(id) +
                " appears in both train and test splits");
  return manifest;
}

Tensor<float> image_to_tensor(const PngImage& png, std::size_t channels) {
  require(channels == 1 || channels == 3, ErrCode::invalid_argument,
          "image_to_tensor: declared channels must be 1 or 3");
  require(png.channels == 1 || png.channels == 3 || png.channels == 4, ErrCode::unsupported,
          "image_to_tensor: cannot handle a " + std::to_string(png.channels) + "-channel image");

  auto out = Tensor<float>::zeros({channels, png.height, png.width});
  const std::size_t hw = png.height * png.width;
  for (std::size_t i = 0; i < hw; ++i) {
    const std::uint8_t* px = png.pixels.data() + i * png.channels;
    float rgb[3];
    if (png.channels == 1) {
      rgb[0] = rgb[1] = rgb[2] = static_cast<float>(px[0]);
    } else {
      rgb[0] = static_cast<float>(px[0]);
      rgb[1] = static_cast<float>(px[1]);
      rgb[2] = static_cast<float>(px[2]);
    }
    if (channels == 1) {
      out.data()[i] = (rgb[0] + rgb[1] + rgb[2]) / 3.0f / 127.5f - 1.0f;
    } else {
      for (std::size_t c = 0; c < 3; ++c) out.data()[c * hw + i] = rgb[c] / 127.5f - 1.0f;
    }
  }
  return out;
}

Dataset load_dataset(const std::string& root, std::size_t image_size, std::size_t channels) {
  Dataset ds;
  ds.manifest = load_manifest(root, image_size, channels);
  ds.images.reserve(ds.manifest.rows.size());
  for (std::size_t i = 0; i < ds.manifest.rows.size(); ++i) {
    const ManifestRow& row = ds.manifest.rows[i];
    const PngImage png = read_png(root + "/" + row.path);
    require(png.width == image_size && png.height == image_size, ErrCode::corrupt,
            "load_dataset: " + row.path + " is " + std::to_string(png.width) + "x" +
                std::to_string(png.height) + ", expected " + std::to_string(image_size) + "x" +
                std::to_string(image_size));
    ds.images.push_back(image_to_tensor(png, channels));
    if (row.split == Split::train) {
      ds.train_rows.push_back(i);
      ds.train_by_class[row.class_id].push_back(i);
    } else {
      ds.test_rows.push_back(i);
      ds.test_by_class[row.class_id].push_back(i);
    }
  }
  return ds;
}

DatasetManifest gen_synthetic(const std::string& out_dir, const SyntheticSpec& spec) {
  require(spec.n_train_classes >= 2 && spec.n_test_classes >= 2, ErrCode::invalid_argument,
          "gen_synthetic: need at least 2 train and 2 test classes");
  require(spec.n_train_classes + spec.n_test_classes <= kShapeCount, ErrCode::invalid_argument,
          "gen_synthetic: only " + std::to_string(kShapeCount) + " shape classes available");
  require(spec.per_class >= 1, ErrCode::invalid_argument, "gen_synthetic: per_class must be >= 1");
  require(spec.image_size >= 8, ErrCode::invalid_argument, "gen_synthetic: image size too small");
  require(spec.channels == 1 || spec.channels == 3, ErrCode::invalid_argument,
          "gen_synthetic: channels must be 1 or 3");

  std::error_code fs_err;
  std::filesystem::create_directories(out_dir, fs_err);
  require(!fs_err, ErrCode::io, "gen_synthetic: cannot create " + out_dir + ": " +
                                    fs_err.message());

  DatasetManifest manifest;
  manifest.root = out_dir;
  manifest.image_size = spec.image_size;
  manifest.channels = spec.channels;

  const std::size_t total = spec.n_train_classes + spec.n_test_classes;
  for (std::size_t cls = 0; cls < total; ++cls) {
    for (std::size_t idx = 0; idx < spec.per_class; ++idx) {
      Rng rng(mix64(mix64(spec.seed ^ cls) ^ idx));
      const auto pixels = render_image(cls, spec.image_size, spec.channels, rng);

      char name[64];
      std::snprintf(name, sizeof(name), "img_%s_%04zu.png", kShapeNames[cls], idx);
      write_png(out_dir + "/" + name, spec.image_size, spec.image_size, spec.channels, pixels);

      ManifestRow row;
      row.path = name;
      row.class_id = static_cast<int>(cls);
      row.split = cls < spec.n_train_classes ? Split::train : Split::test;
      manifest.rows.push_back(std::move(row));
    }
  }

  const std::string csv = out_dir + "/manifest.csv";
  std::ofstream out(csv);
  require(out.good(), ErrCode::io, "gen_synthetic: cannot open " + csv);
  out << "path,class_id,split\n";
  for (const ManifestRow& row : manifest.rows)
    out << row.path << ',' << row.class_id << ','
        << (row.split == Split::train ? "train" : "test") << '\n';
  out.close();
  require(out.good(), ErrCode::io, "gen_synthetic: failed writing " + csv);
  return manifest;
}

}  // namespace ssgan
