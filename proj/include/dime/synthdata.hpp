#pragma once

// Synthetic image dataset with binary attributes drawn from an explicit joint
// table, so label correlations are known exactly. Also reads and writes the IDX
// container used by the classic digit datasets.

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include <nlohmann/json.hpp>

#include "dime/tensor.hpp"

namespace dime::data {

struct AttributeSpec {
  std::vector<std::string> names;
  // Probability of each attribute combination; cell index = sum_i a_i << i.
  std::vector<double> joint;

  int num_attributes() const { return static_cast<int>(names.size()); }

  void validate() const {
    if (names.empty() || names.size() > 20) throw std::invalid_argument("attribute count must be 1..20");
    if (joint.size() != (std::size_t{1} << names.size()))
      throw std::invalid_argument("joint table needs 2^n cells, got " + std::to_string(joint.size()));
    double total = 0;
    for (double p : joint) {
      if (!(p >= 0) || !std::isfinite(p)) throw std::invalid_argument("joint table entries must be non-negative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("joint table must sum to 1");
  }

  nlohmann::json to_json() const { return {{"names", names}, {"joint", joint}}; }
  static AttributeSpec from_json(const nlohmann::json& j) {
    AttributeSpec s{j.at("names").get<std::vector<std::string>>(), j.at("joint").get<std::vector<double>>()};
    s.validate();
    return s;
  }
};

// shape (circle/square), color (red/blue), stripes, background (dark/light).
// color agrees with shape 80% of the time (correlation 0.6), background 60% (0.2).
inline AttributeSpec default_attribute_spec() {
  AttributeSpec s;
  s.names = {"shape", "color", "stripes", "background"};
  s.joint.assign(16, 0.0);
  for (int cell = 0; cell < 16; ++cell) {
    const int shape = cell & 1, color = (cell >> 1) & 1, bg = (cell >> 3) & 1;
    s.joint[cell] = 0.5 * (color == shape ? 0.8 : 0.2) * 0.5 * (bg == shape ? 0.6 : 0.4);
  }
  return s;
}

inline std::vector<int> sample_attributes(const AttributeSpec& spec, Rng& rng) {
  spec.validate();
  const double u = uniform01(rng);
  double acc = 0;
  std::size_t cell = spec.joint.size() - 1;
  for (std::size_t c = 0; c < spec.joint.size(); ++c) {
    acc += spec.joint[c];
    if (u < acc) {
      cell = c;
      break;
    }
  }
  while (spec.joint[cell] == 0.0) --cell;  // float slack at the top end
  std::vector<int> a(spec.names.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<int>((cell >> i) & 1);
  return a;
}

// Exact Pearson correlations between attributes implied by the joint table.
// Entries involving an attribute with marginal 0 or 1 are empty.
inline std::vector<std::vector<std::optional<double>>> compute_ground_truth_correlations(const AttributeSpec& spec) {
  spec.validate();
  const int n = spec.num_attributes();
  std::vector<double> p(n, 0.0);
  std::vector<std::vector<double>> pij(n, std::vector<double>(n, 0.0));
  for (std::size_t cell = 0; cell < spec.joint.size(); ++cell)
    for (int i = 0; i < n; ++i) {
      if (!((cell >> i) & 1)) continue;
      p[i] += spec.joint[cell];
      for (int j = 0; j < n; ++j)
        if ((cell >> j) & 1) pij[i][j] += spec.joint[cell];
    }
  std::vector<std::vector<std::optional<double>>> corr(n, std::vector<std::optional<double>>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double vi = p[i] * (1 - p[i]), vj = p[j] * (1 - p[j]);
      if (vi <= 0 || vj <= 0) continue;
      corr[i][j] = i == j ? 1.0 : (pij[i][j] - p[i] * p[j]) / std::sqrt(vi * vj);
    }
  return corr;
}

struct RenderLatents {
  double cx, cy, radius, brightness;
  int stripe_phase;

  static constexpr int kDim = 6;
  // Normalized to roughly [-1, 1] for regression targets.
  std::array<float, kDim> encode() const {
    constexpr double two_pi = 6.283185307179586;
    return {static_cast<float>((cx - 16) / 4), static_cast<float>((cy - 16) / 4),
            static_cast<float>((radius - 8.5) / 1.5), static_cast<float>((brightness - 0.9) / 0.1),
            static_cast<float>(std::cos(two_pi * stripe_phase / 4)), static_cast<float>(std::sin(two_pi * stripe_phase / 4))};
  }
};

inline RenderLatents sample_latents(int resolution, Rng& rng) {
  const double s = resolution / 32.0;
  return {s * (12 + 8 * uniform01(rng)), s * (12 + 8 * uniform01(rng)), s * (7 + 3 * uniform01(rng)),
          0.8 + 0.2 * uniform01(rng), uniform_int(rng, 0, 3)};
}

// Renders attributes [shape, color, stripes, background] (extra attributes are ignored)
// into a 3-channel image in [-1, 1]. Edges are 2x2 supersampled.
inline Tensor<float> render_image(std::span<const int> attrs, int resolution, const RenderLatents& lat) {
  if (resolution < 16 || resolution > 256 || resolution % 8 != 0)
    throw std::invalid_argument("unsupported resolution " + std::to_string(resolution));
  if (attrs.size() < 4) throw std::invalid_argument("render_image needs 4 attributes");
  for (int a : attrs)
    if (a != 0 && a != 1) throw std::invalid_argument("attributes must be binary");
  const bool square = attrs[0], blue = attrs[1], striped = attrs[2], light = attrs[3];
  const std::array<double, 3> bg = light ? std::array<double, 3>{0.55, 0.5, 0.35} : std::array<double, 3>{-0.75, -0.7, -0.5};
  std::array<double, 3> fill = blue ? std::array<double, 3>{-0.7, -0.3, 0.95} : std::array<double, 3>{0.95, -0.55, -0.65};
  for (auto& c : fill) c *= lat.brightness;
  const std::array<double, 3> stripe{-0.2, -0.2, -0.2};
  const double band = resolution / 16.0;  // stripe half-period in pixels

  Tensor<float> img({3, resolution, resolution});
  const int hw = resolution * resolution;
  for (int y = 0; y < resolution; ++y)
    for (int x = 0; x < resolution; ++x) {
      double cover = 0, stripe_cover = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double px = x + 0.25 + 0.5 * sx, py = y + 0.25 + 0.5 * sy;
          const double dx = px - lat.cx, dy = py - lat.cy;
          const double half = 0.886 * lat.radius;  // equal-area square
          const bool inside = square ? (std::abs(dx) <= half && std::abs(dy) <= half) : (dx * dx + dy * dy <= lat.radius * lat.radius);
          if (!inside) continue;
          cover += 0.25;
          if (striped && static_cast<int>(std::floor((py + lat.stripe_phase * band / 2) / band)) % 2 == 0) stripe_cover += 0.25;
        }
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - cover) * bg[c] + (cover - stripe_cover) * fill[c] + stripe_cover * stripe[c];
        img[c * hw + y * resolution + x] = static_cast<float>(v);
      }
    }
  return img;
}

inline Tensor<float> render_image(std::span<const int> attrs, int resolution, Rng& rng) {
  return render_image(attrs, resolution, sample_latents(resolution, rng));
}

struct Dataset {
  Tensor<float> images;                  // [N, C, H, W] in [-1, 1]
  std::vector<std::vector<int>> labels;  // N rows of binary attributes
  std::vector<std::string> attribute_names;
  Tensor<float> latents;                 // [N, L]; empty for ingested data
  int train_count = 0;                   // rows [0, train_count) train, the rest test
  nlohmann::json manifest;

  int size() const { return images.empty() ? 0 : images.dim(0); }
  int num_attributes() const { return static_cast<int>(attribute_names.size()); }

  std::vector<int> train_indices() const {
    std::vector<int> v(train_count);
    std::iota(v.begin(), v.end(), 0);
    return v;
  }
  std::vector<int> test_indices() const {
    std::vector<int> v(size() - train_count);
    std::iota(v.begin(), v.end(), train_count);
    return v;
  }
  Tensor<float> label_tensor(std::span<const int> rows) const {
    Tensor<float> t({static_cast<int>(rows.size()), num_attributes()});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (int a = 0; a < num_attributes(); ++a) t[i * num_attributes() + a] = static_cast<float>(labels[rows[i]][a]);
    return t;
  }
};

// Sample Pearson correlation matrix of label columns over the given rows.
inline std::vector<std::vector<std::optional<double>>> empirical_label_correlations(const Dataset& d, std::span<const int> rows) {
  const int n = d.num_attributes();
  std::vector<std::vector<std::optional<double>>> corr(n, std::vector<std::optional<double>>(n));
  const double m = static_cast<double>(rows.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double si = 0, sj = 0, sij = 0, sii = 0, sjj = 0;
      for (int r : rows) {
        const double a = d.labels[r][i], b = d.labels[r][j];
        si += a, sj += b, sij += a * b, sii += a * a, sjj += b * b;
      }
      const double vi = sii / m - (si / m) * (si / m), vj = sjj / m - (sj / m) * (sj / m);
      if (vi <= 0 || vj <= 0) continue;
      corr[i][j] = (sij / m - si / m * sj / m) / std::sqrt(vi * vj);
    }
  return corr;
}

inline nlohmann::json correlations_json(const std::vector<std::vector<std::optional<double>>>& c) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& row : c) {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& v : row) r.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
    out.push_back(r);
  }
  return out;
}

struct GenerationConfig {
  int count = 6000;
  int resolution = 32;
  double test_fraction = 0.1;
  std::uint64_t seed = 1;
  AttributeSpec spec = default_attribute_spec();

  void validate() const {
    spec.validate();
    if (spec.num_attributes() != 4) throw std::invalid_argument("the renderer draws exactly 4 attributes");
    if (count < 2) throw std::invalid_argument("dataset count must be at least 2");
    if (!(test_fraction > 0 && test_fraction < 1)) throw std::invalid_argument("test_fraction must be in (0,1)");
  }
};

// Each image uses its own derived stream, so any row can be regenerated alone.
inline Dataset generate_dataset(const GenerationConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.attribute_names = cfg.spec.names;
  d.images = Tensor<float>({cfg.count, 3, cfg.resolution, cfg.resolution});
  d.latents = Tensor<float>({cfg.count, RenderLatents::kDim});
  d.labels.resize(cfg.count);
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    d.labels[i] = sample_attributes(cfg.spec, rng);
    const auto lat = sample_latents(cfg.resolution, rng);
    auto img = render_image(d.labels[i], cfg.resolution, lat);
    std::copy(img.data.begin(), img.data.end(), d.images.sample(i).begin());
    const auto enc = lat.encode();
    std::copy(enc.begin(), enc.end(), d.latents.sample(i).begin());
  }
  d.train_count = cfg.count - std::max(1, static_cast<int>(std::lround(cfg.count * cfg.test_fraction)));

  const auto train = d.train_indices();
  std::vector<double> marginals(cfg.spec.num_attributes(), 0.0);
  for (int r : train)
    for (int a = 0; a < cfg.spec.num_attributes(); ++a) marginals[a] += d.labels[r][a];
  for (auto& m : marginals) m /= train.size();
  d.manifest = {{"kind", "synthetic"},
                {"count", cfg.count},
                {"resolution", cfg.resolution},
                {"channels", 3},
                {"seed", cfg.seed},
                {"attributes", cfg.spec.to_json()},
                {"splits", {{"train", {0, d.train_count}}, {"test", {d.train_count, cfg.count}}}},
                {"train_marginals", marginals},
                {"ground_truth_correlations", correlations_json(compute_ground_truth_correlations(cfg.spec))},
                {"train_label_correlations", correlations_json(empirical_label_correlations(d, train))}};
  return d;
}

// ---------------------------------------------------------------------------
// IDX container: big-endian magic (0x00 0x00 type ndims), big-endian u32 dims,
// then big-endian payload.

enum class IdxType : std::uint8_t { UByte = 0x08, Float = 0x0D };

struct IdxArray {
  IdxType type = IdxType::UByte;
  std::vector<int> dims;
  std::vector<std::uint8_t> bytes;  // UByte payload
  std::vector<float> floats;        // Float payload
};

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline IdxArray parse_idx(std::span<const std::uint8_t> buf) {
  if (buf.size() < 4) throw IdxError("idx: truncated header");
  if (buf[0] != 0 || buf[1] != 0) throw IdxError("idx: bad magic");
  const auto type = static_cast<IdxType>(buf[2]);
  if (type != IdxType::UByte && type != IdxType::Float) throw IdxError("idx: unsupported element type");
  const int nd = buf[3];
  if (nd < 1 || nd > 4) throw IdxError("idx: unsupported rank");
  if (buf.size() < 4 + 4 * static_cast<std::size_t>(nd)) throw IdxError("idx: truncated dimensions");
  IdxArray a;
  a.type = type;
  std::size_t count = 1;
  for (int i = 0; i < nd; ++i) {
    const auto* p = buf.data() + 4 + 4 * i;
    const std::uint32_t d = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
    if (d > (1u << 28)) throw IdxError("idx: dimension too large");
    a.dims.push_back(static_cast<int>(d));
    count *= d;
  }
  const std::size_t off = 4 + 4 * static_cast<std::size_t>(nd);
  const std::size_t width = type == IdxType::UByte ? 1 : 4;
  if (buf.size() - off != count * width)
    throw IdxError("idx: payload has " + std::to_string(buf.size() - off) + " bytes, expected " +
                   std::to_string(count * width));
  if (type == IdxType::UByte) {
    a.bytes.assign(buf.begin() + off, buf.end());
  } else {
    a.floats.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const auto* p = buf.data() + off + 4 * i;
      const std::uint32_t u = (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
      std::memcpy(&a.floats[i], &u, 4);
    }
  }
  return a;
}

inline std::vector<std::uint8_t> encode_idx(const IdxArray& a) {
  std::vector<std::uint8_t> out{0, 0, static_cast<std::uint8_t>(a.type), static_cast<std::uint8_t>(a.dims.size())};
  std::size_t count = 1;
  for (int d : a.dims) {
    const auto u = static_cast<std::uint32_t>(d);
    out.insert(out.end(), {static_cast<std::uint8_t>(u >> 24), static_cast<std::uint8_t>(u >> 16),
                           static_cast<std::uint8_t>(u >> 8), static_cast<std::uint8_t>(u)});
    count *= static_cast<std::size_t>(d);
  }
  if (a.type == IdxType::UByte) {
    if (a.bytes.size() != count) throw IdxError("idx: payload size does not match dims");
    out.insert(out.end(), a.bytes.begin(), a.bytes.end());
  } else {
    if (a.floats.size() != count) throw IdxError("idx: payload size does not match dims");
    for (float f : a.floats) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      out.insert(out.end(), {static_cast<std::uint8_t>(u >> 24), static_cast<std::uint8_t>(u >> 16),
                             static_cast<std::uint8_t>(u >> 8), static_cast<std::uint8_t>(u)});
    }
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

inline IdxArray read_idx(const std::filesystem::path& path) { return parse_idx(read_file_bytes(path)); }
inline void write_idx(const std::filesystem::path& path, const IdxArray& a) { write_file_bytes(path, encode_idx(a)); }

using LabelPredicate = std::function<int(int)>;

// Reads an image file (magic 0x00000803: count, rows, cols) and a label file
// (0x00000801) into a single-channel dataset. The binary attribute is
// predicate(label), parity by default.
inline Dataset ingest_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                          const LabelPredicate& predicate = [](int label) { return label % 2; },
                          double test_fraction = 0.1) {
  const auto imgs = read_idx(images_path);
  const auto labs = read_idx(labels_path);
  if (imgs.type != IdxType::UByte || imgs.dims.size() != 3) throw IdxError("idx: images must be magic 0x00000803");
  if (labs.type != IdxType::UByte || labs.dims.size() != 1) throw IdxError("idx: labels must be magic 0x00000801");
  if (imgs.dims[0] != labs.dims[0]) throw IdxError("idx: image and label counts differ");
  Dataset d;
  const int n = imgs.dims[0];
  d.images = Tensor<float>({n, 1, imgs.dims[1], imgs.dims[2]});
  for (std::size_t i = 0; i < imgs.bytes.size(); ++i) d.images[i] = static_cast<float>(imgs.bytes[i] / 127.5 - 1.0);
  d.attribute_names = {"predicate"};
  d.labels.resize(n);
  std::vector<int> classes(n);
  for (int i = 0; i < n; ++i) {
    classes[i] = labs.bytes[i];
    const int a = predicate(classes[i]);
    if (a != 0 && a != 1) throw std::invalid_argument("label predicate must return 0 or 1");
    d.labels[i] = {a};
  }
  d.train_count = n > 1 ? n - std::max(1, static_cast<int>(std::lround(n * test_fraction))) : n;
  d.manifest = {{"kind", "idx"},
                {"count", n},
                {"resolution", imgs.dims[1]},
                {"channels", 1},
                {"source_images", images_path.string()},
                {"source_labels", labels_path.string()},
                {"class_labels", classes},
                {"splits", {{"train", {0, d.train_count}}, {"test", {d.train_count, n}}}}};
  return d;
}

// ---------------------------------------------------------------------------
// On-disk layout: images.idx (float32, [N, C, H, W]) + labels.csv + manifest.json.

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  IdxArray a;
  a.type = IdxType::Float;
  a.dims = d.images.shape;
  a.floats.assign(d.images.data.begin(), d.images.data.end());
  write_idx(dir / "images.idx", a);

  std::ofstream csv(dir / "labels.csv");
  csv << "index,split";
  for (const auto& n : d.attribute_names) csv << ',' << n;
  const int L = d.latents.empty() ? 0 : d.latents.dim(1);
  for (int l = 0; l < L; ++l) csv << ",latent" << l;
  csv << '\n';
  csv.precision(9);
  for (int i = 0; i < d.size(); ++i) {
    csv << i << ',' << (i < d.train_count ? "train" : "test");
    for (int v : d.labels[i]) csv << ',' << v;
    for (int l = 0; l < L; ++l) csv << ',' << d.latents[static_cast<std::size_t>(i) * L + l];
    csv << '\n';
  }
  if (!csv) throw std::runtime_error("failed writing labels.csv");
  std::ofstream(dir / "manifest.json") << d.manifest.dump(2) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  const auto a = read_idx(dir / "images.idx");
  if (a.type != IdxType::Float || a.dims.size() != 4) throw IdxError("dataset images must be a 4-d float IDX array");
  d.images = Tensor<float>(a.dims, a.floats);
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("missing manifest.json in " + dir.string());
  d.manifest = nlohmann::json::parse(mf);

  std::ifstream csv(dir / "labels.csv");
  if (!csv) throw std::runtime_error("missing labels.csv in " + dir.string());
  std::string line;
  std::getline(csv, line);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  int L = 0;
  for (std::size_t c = 2; c < header.size(); ++c) {
    if (header[c].rfind("latent", 0) == 0)
      ++L;
    else
      d.attribute_names.push_back(header[c]);
  }
  const int n = d.images.dim(0), A = d.num_attributes();
  if (L > 0) d.latents = Tensor<float>({n, L});
  d.labels.assign(n, std::vector<int>(A));
  int rows = 0, train = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    const int i = std::stoi(cell);
    if (i != rows || i >= n) throw std::runtime_error("labels.csv rows out of order");
    std::getline(ss, cell, ',');
    if (cell == "train") ++train;
    for (int k = 0; k < A; ++k) {
      std::getline(ss, cell, ',');
      d.labels[i][k] = std::stoi(cell);
    }
    for (int l = 0; l < L; ++l) {
      std::getline(ss, cell, ',');
      d.latents[static_cast<std::size_t>(i) * L + l] = std::stof(cell);
    }
    ++rows;
  }
  if (rows != n) throw std::runtime_error("labels.csv has " + std::to_string(rows) + " rows for " + std::to_string(n) + " images");
  d.train_count = train;
  return d;
}

}  // namespace dime::data
