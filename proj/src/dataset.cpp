#include "ctnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ctnet/error.hpp"

namespace ctnet::data {

namespace fs = std::filesystem;

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_commas(std::string_view line) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const auto comma = line.find(',', pos);
    out.emplace_back(trim(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos)));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.path).second) throw ConfigError("duplicate image path '" + r.path + "' in manifest");
    if (r.label >= class_names.size()) {
      throw ConfigError("label " + std::to_string(r.label) + " of '" + r.path + "' is out of range for " +
                        std::to_string(class_names.size()) + " classes");
    }
    if (r.patient_id.empty()) throw ConfigError("image '" + r.path + "' has an empty patient id");
  }
}

std::vector<std::size_t> DatasetManifest::class_histogram() const {
  std::vector<std::size_t> h(class_names.size(), 0);
  for (const auto& r : records) ++h.at(r.label);
  return h;
}

std::vector<std::string> DatasetManifest::patients() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.patient_id);
  return {s.begin(), s.end()};
}

std::string DatasetManifest::resolve(const ImageRecord& r) const {
  const fs::path p(r.path);
  if (p.is_absolute() || base_dir.empty()) return r.path;
  return (fs::path(base_dir) / p).string();
}

DatasetManifest parse_manifest(std::string_view text, std::string base_dir) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  bool fixed_classes = false;
  bool have_header = false;
  std::size_t col_path = 0, col_patient = 0, col_label = 0, columns = 0;
  std::vector<std::string> label_names;  // per record, resolved at the end
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line_no;
    const auto line = trim(raw);
    const auto where = "manifest line " + std::to_string(line_no) + ": ";
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto body = trim(line.substr(1));
      const auto eq = body.find('=');
      if (eq != std::string_view::npos && trim(body.substr(0, eq)) == "classes") {
        if (have_header) throw ConfigError(where + "classes line must precede the header");
        m.class_names = split_commas(body.substr(eq + 1));
        for (const auto& c : m.class_names) {
          if (c.empty()) throw ConfigError(where + "empty class name");
        }
        fixed_classes = true;
      }
      continue;
    }
    auto fields = split_commas(line);
    if (!have_header) {
      columns = fields.size();
      bool p = false, q = false, l = false;
      for (std::size_t i = 0; i < fields.size(); ++i) {
        if (fields[i] == "path") col_path = i, p = true;
        if (fields[i] == "patient_id") col_patient = i, q = true;
        if (fields[i] == "label") col_label = i, l = true;
      }
      if (!p) throw ConfigError(where + "missing 'path' column");
      if (!q) throw ConfigError(where + "missing 'patient_id' column");
      if (!l) throw ConfigError(where + "missing 'label' column");
      have_header = true;
      continue;
    }
    if (fields.size() != columns) {
      throw ConfigError(where + "expected " + std::to_string(columns) + " fields, got " +
                        std::to_string(fields.size()));
    }
    if (fields[col_path].empty()) throw ConfigError(where + "empty path");
    m.records.push_back(ImageRecord{fields[col_path], fields[col_patient], 0});
    label_names.push_back(fields[col_label]);
  }
  if (!have_header) throw ConfigError("manifest has no header line");

  if (!fixed_classes) {
    std::set<std::string> names(label_names.begin(), label_names.end());
    m.class_names.assign(names.begin(), names.end());
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < m.class_names.size(); ++i) {
    if (!index.emplace(m.class_names[i], i).second) {
      throw ConfigError("duplicate class name '" + m.class_names[i] + "'");
    }
  }
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto it = index.find(label_names[i]);
    if (it == index.end()) {
      throw ConfigError("unknown label '" + label_names[i] + "' for '" + m.records[i].path + "'");
    }
    m.records[i].label = it->second;
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), fs::path(path).parent_path().string());
}

std::string print_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "# classes = ";
  for (std::size_t i = 0; i < m.class_names.size(); ++i) os << (i ? "," : "") << m.class_names[i];
  os << "\npath,patient_id,label\n";
  for (const auto& r : m.records) os << r.path << ',' << r.patient_id << ',' << m.class_names.at(r.label) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Netpbm

namespace {

class NetpbmParser {
 public:
  explicit NetpbmParser(std::string_view bytes) : b_(bytes) {}

  Tensor parse() {
    if (b_.size() < 2 || b_[0] != 'P') throw FormatError("not a Netpbm image: bad magic", 0);
    const char kind = b_[1];
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
      throw FormatError(std::string("unsupported Netpbm type P") + kind, 1);
    }
    pos_ = 2;
    const std::size_t w = header_number("width");
    const std::size_t h = header_number("height");
    const std::size_t maxval = header_number("maxval");
    if (w == 0 || h == 0) throw FormatError("zero image extent", pos_);
    if (maxval == 0 || maxval > 65535) throw FormatError("maxval out of range", pos_);
    const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
    const bool binary = kind == '5' || kind == '6';
    if (w > (1u << 20) || h > (1u << 20)) throw FormatError("implausible image extent", pos_);

    Tensor out({channels, h, w});
    const double scale = 255.0 / static_cast<double>(maxval);
    auto map = [&](std::size_t v, std::size_t at) {
      if (v > maxval) throw FormatError("sample exceeds maxval", at);
      return maxval == 255 ? static_cast<double>(v) : static_cast<double>(v) * scale;
    };

    if (binary) {
      if (pos_ >= b_.size() || !is_space(b_[pos_])) throw FormatError("missing whitespace after maxval", pos_);
      ++pos_;
      const std::size_t bytes_per = maxval > 255 ? 2 : 1;
      const std::size_t need = w * h * channels * bytes_per;
      if (b_.size() - pos_ < need) throw FormatError("truncated raster", b_.size());
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t at = pos_;
            std::size_t v = static_cast<unsigned char>(b_[pos_++]);
            if (bytes_per == 2) v = (v << 8) | static_cast<unsigned char>(b_[pos_++]);
            out[(c * h + y) * w + x] = map(v, at);
          }
    } else {
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          for (std::size_t c = 0; c < channels; ++c) {
            skip_space_and_comments();
            const std::size_t at = pos_;
            out[(c * h + y) * w + x] = map(number("sample"), at);
          }
    }
    return out;
  }

 private:
  static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (is_space(b_[pos_])) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t header_number(const char* what) {
    if (pos_ < b_.size() && !is_space(b_[pos_]) && b_[pos_] != '#') {
      throw FormatError(std::string("expected whitespace before ") + what, pos_);
    }
    skip_space_and_comments();
    return number(what);
  }

  std::size_t number(const char* what) {
    if (pos_ >= b_.size()) throw FormatError(std::string("truncated: missing ") + what, pos_);
    if (b_[pos_] < '0' || b_[pos_] > '9') throw FormatError(std::string("expected a number for ") + what, pos_);
    std::size_t v = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > (1u << 24)) throw FormatError(std::string("number too large for ") + what, pos_);
      ++pos_;
    }
    return v;
  }

  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace

Tensor decode_netpbm(std::string_view bytes) { return NetpbmParser(bytes).parse(); }

Tensor decode_image(std::string_view bytes) {
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '3' || bytes[1] == '6')) {
    throw FormatError("expected a grayscale image, got a color PPM", 1);
  }
  return decode_netpbm(bytes);
}

Tensor read_image(const std::string& path) {
  try {
    return decode_image(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.detail(), e.offset());
  }
}

std::string encode_netpbm(const Tensor& image) {
  std::size_t c = 1, h = 0, w = 0;
  if (image.rank() == 2) {
    h = image.dim(0), w = image.dim(1);
  } else if (image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3)) {
    c = image.dim(0), h = image.dim(1), w = image.dim(2);
  } else {
    throw DimensionError("cannot encode image of shape " + shape_string(image.shape()));
  }
  std::string out = (c == 1 ? "P5\n" : "P6\n") + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double v = std::clamp(std::round(image[(ch * h + y) * w + x]), 0.0, 255.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
      }
  return out;
}

void write_image(const std::string& path, const Tensor& image) {
  const auto bytes = encode_netpbm(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

void require_chw(const Tensor& image, const char* what) {
  if (image.rank() != 3) throw DimensionError(std::string(what) + " expects [C,H,W], got " + shape_string(image.shape()));
}

// Bilinear read of plane p at (y, x) with coordinates clamped to the edge.
double sample_clamped(const double* p, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(y);
  const auto x0 = static_cast<std::size_t>(x);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  const std::size_t y1 = std::min(y0 + 1, h - 1);
  const std::size_t x1 = std::min(x0 + 1, w - 1);
  const double top = fx == 0 ? p[y0 * w + x0] : (1 - fx) * p[y0 * w + x0] + fx * p[y0 * w + x1];
  if (fy == 0) return top;
  const double bottom = fx == 0 ? p[y1 * w + x0] : (1 - fx) * p[y1 * w + x0] + fx * p[y1 * w + x1];
  return (1 - fy) * top + fy * bottom;
}

}  // namespace

Tensor resize(const Tensor& image, std::size_t h, std::size_t w) {
  require_chw(image, "resize");
  if (h == 0 || w == 0) throw DimensionError("resize target must be at least 1x1");
  const std::size_t c = image.dim(0), ih = image.dim(1), iw = image.dim(2);
  if (ih == h && iw == w) return image;
  Tensor out({c, h, w});
  const double sy = h > 1 ? static_cast<double>(ih - 1) / static_cast<double>(h - 1) : 0.0;
  const double sx = w > 1 ? static_cast<double>(iw - 1) / static_cast<double>(w - 1) : 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = image.data().data() + ch * ih * iw;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(ch * h + y) * w + x] =
            sample_clamped(src, ih, iw, static_cast<double>(y) * sy, static_cast<double>(x) * sx);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentationConfig AugmentationConfig::none() {
  AugmentationConfig c;
  c.horizontal_flip = c.vertical_flip = false;
  c.zoom_min = c.zoom_max = 1.0;
  c.rotation_min_deg = c.rotation_max_deg = 0.0;
  c.width_shift = c.height_shift = c.shear = 0.0;
  return c;
}

void AugmentationConfig::validate() const {
  if (!(zoom_min > 0) || !(zoom_max >= zoom_min)) throw ConfigError("zoom range must be positive and ordered");
  if (!(rotation_max_deg >= rotation_min_deg)) throw ConfigError("rotation range must be ordered");
  if (width_shift < 0 || height_shift < 0 || shear < 0) throw ConfigError("shift and shear ranges must be >= 0");
  if (!std::isfinite(rescale)) throw ConfigError("rescale must be finite");
}

AffineParams sample_affine(const AugmentationConfig& config, std::size_t h, std::size_t w, Rng& rng) {
  config.validate();
  // Every draw is made even for disabled transforms so the stream layout
  // does not depend on the configuration.
  AffineParams p;
  p.rotation_deg = rng.uniform(config.rotation_min_deg, config.rotation_max_deg);
  p.shift_x = rng.uniform(-config.width_shift, config.width_shift) * static_cast<double>(w);
  p.shift_y = rng.uniform(-config.height_shift, config.height_shift) * static_cast<double>(h);
  p.shear = rng.uniform(-config.shear, config.shear);
  p.zoom_x = rng.uniform(config.zoom_min, config.zoom_max);
  p.zoom_y = rng.uniform(config.zoom_min, config.zoom_max);
  const bool fh = rng.bernoulli(0.5);
  const bool fv = rng.bernoulli(0.5);
  p.flip_h = config.horizontal_flip && fh;
  p.flip_v = config.vertical_flip && fv;
  return p;
}

Tensor apply_affine(const Tensor& image, const AffineParams& p, double rescale) {
  require_chw(image, "augment");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double theta = p.rotation_deg * std::acos(-1.0) / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  // Maps output offsets from the centre to input offsets: rotation * shear * zoom.
  const double m00 = cs * p.zoom_x, m01 = (cs * p.shear - sn) * p.zoom_y;
  const double m10 = sn * p.zoom_x, m11 = (sn * p.shear + cs) * p.zoom_y;
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;

  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = image.data().data() + ch * h * w;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double y = static_cast<double>(i) - cy, x = static_cast<double>(j) - cx;
        const double sx = m00 * x + m01 * y + cx + p.shift_x;
        const double sy = m10 * x + m11 * y + cy + p.shift_y;
        const std::size_t oi = p.flip_v ? h - 1 - i : i;
        const std::size_t oj = p.flip_h ? w - 1 - j : j;
        out[(ch * h + oi) * w + oj] = sample_clamped(src, h, w, sy, sx) * rescale;
      }
  }
  return out;
}

Tensor augment(const Tensor& image, const AugmentationConfig& config, Rng& rng) {
  require_chw(image, "augment");
  return apply_affine(image, sample_affine(config, image.dim(1), image.dim(2), rng), config.rescale);
}

// ---------------------------------------------------------------------------
// Splits

std::map<std::string, std::size_t> patient_labels(const DatasetManifest& m) {
  std::map<std::string, std::vector<std::size_t>> votes;
  for (const auto& r : m.records) {
    auto& v = votes[r.patient_id];
    if (v.size() <= r.label) v.resize(r.label + 1, 0);
    ++v[r.label];
  }
  std::map<std::string, std::size_t> out;
  for (const auto& [p, v] : votes)
    out[p] = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
  return out;
}

namespace {

// Patients grouped by label (unlabeled ones count as class 0) and shuffled
// within each class, classes in ascending label order.
std::vector<std::vector<std::string>> shuffled_by_class(const std::vector<std::string>& sorted_patients,
                                                        const std::map<std::string, std::size_t>& labels, Rng& rng) {
  std::map<std::size_t, std::vector<std::string>> by_class;
  for (const auto& p : sorted_patients) {
    const auto it = labels.find(p);
    by_class[it == labels.end() ? 0 : it->second].push_back(p);
  }
  std::vector<std::vector<std::string>> out;
  for (auto& [label, list] : by_class) {
    shuffle(list, rng);
    out.push_back(std::move(list));
  }
  return out;
}

// Classes interleaved by fractional rank (i + 0.5) / n_c, ties by label, so
// every prefix keeps the class proportions.
std::vector<std::string> interleaved(std::vector<std::vector<std::string>> classes) {
  struct Keyed {
    double rank;
    std::size_t label;
    std::string patient;
  };
  std::vector<Keyed> keyed;
  for (std::size_t c = 0; c < classes.size(); ++c)
    for (std::size_t i = 0; i < classes[c].size(); ++i)
      keyed.push_back({(static_cast<double>(i) + 0.5) / static_cast<double>(classes[c].size()), c,
                       std::move(classes[c][i])});
  std::stable_sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.rank != b.rank ? a.rank < b.rank : a.label < b.label;
  });
  std::vector<std::string> out;
  for (auto& k : keyed) out.push_back(std::move(k.patient));
  return out;
}

}  // namespace

SplitPlan patient_kfold_split(const DatasetManifest& m, std::size_t k, std::uint64_t seed) {
  const auto sorted = m.patients();
  if (k < 2) throw ConfigError("k-fold split needs k >= 2");
  if (k > sorted.size()) {
    throw ConfigError("k = " + std::to_string(k) + " exceeds the number of patients (" +
                      std::to_string(sorted.size()) + ")");
  }
  Rng rng(seed);
  // Classes back to back, dealt round-robin with one running counter: every
  // fold gets floor or ceil of n_c / k patients of each class.
  std::vector<std::set<std::string>> groups(k);
  std::size_t next = 0;
  for (const auto& list : shuffled_by_class(sorted, patient_labels(m), rng))
    for (const auto& p : list) groups[next++ % k].insert(p);

  SplitPlan plan{k, seed, {}};
  for (std::size_t f = 0; f < k; ++f) {
    Fold fold;
    for (const auto& p : sorted) (groups[f].count(p) ? fold.test_patients : fold.train_patients).push_back(p);
    for (std::size_t i = 0; i < m.records.size(); ++i)
      (groups[f].count(m.records[i].patient_id) ? fold.test_indices : fold.train_indices).push_back(i);
    plan.folds.push_back(std::move(fold));
  }
  return plan;
}

PatientSplit train_val_split(const std::vector<std::string>& patients, double fraction, std::uint64_t seed) {
  return train_val_split(patients, {}, fraction, seed);
}

PatientSplit train_val_split(const std::vector<std::string>& patients,
                             const std::map<std::string, std::size_t>& labels, double fraction,
                             std::uint64_t seed) {
  if (!(fraction >= 0 && fraction < 1)) throw ConfigError("validation fraction must lie in [0, 1)");
  std::vector<std::string> sorted(patients);
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  if (sorted.size() < 2) throw ConfigError("train/validation split needs at least 2 patients");
  // The small slack keeps products such as 0.15 * 20 from rounding up past 3.
  auto n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(sorted.size()) - 1e-9));
  n_val = std::min(n_val, sorted.size() - 1);
  Rng rng(seed);
  const auto order = interleaved(shuffled_by_class(sorted, labels, rng));
  PatientSplit s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

std::vector<std::size_t> indices_for(const DatasetManifest& m, const std::vector<std::string>& patients) {
  const std::set<std::string> wanted(patients.begin(), patients.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.records.size(); ++i)
    if (wanted.count(m.records[i].patient_id)) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticConfig::validate() const {
  if (classes < 1 || patients_per_class < 1 || images_per_patient < 1) {
    throw ConfigError("synthetic dataset counts must all be >= 1");
  }
  if (resolution < 8) throw ConfigError("synthetic resolution must be >= 8");
}

double synthetic_radius_fraction(std::size_t label, std::size_t classes) {
  if (classes <= 1) return 0.2;
  constexpr double lo = 0.12, hi = 0.34;
  return lo * std::pow(hi / lo, static_cast<double>(label) / static_cast<double>(classes - 1));
}

Tensor synthetic_image(const SyntheticConfig& cfg, std::size_t label, std::size_t patient, std::size_t image) {
  const auto res = static_cast<double>(cfg.resolution);
  Rng prng(Rng::derive(cfg.seed, {label, patient}));
  const double radius = synthetic_radius_fraction(label, cfg.classes) * res * prng.uniform(0.95, 1.05);
  const double cy = (res - 1) / 2 + prng.uniform(-0.08, 0.08) * res;
  const double cx = (res - 1) / 2 + prng.uniform(-0.08, 0.08) * res;

  // Each image jitters its patient's disk a little, so slices of one patient
  // are related but not interchangeable.
  Rng irng(Rng::derive(cfg.seed, {label, patient, image, 1}));
  const double r = radius * irng.uniform(0.94, 1.06);
  const double y0 = cy + irng.uniform(-0.04, 0.04) * res;
  const double x0 = cx + irng.uniform(-0.04, 0.04) * res;
  Tensor out({1, cfg.resolution, cfg.resolution});
  for (std::size_t i = 0; i < cfg.resolution; ++i)
    for (std::size_t j = 0; j < cfg.resolution; ++j) {
      const double dy = static_cast<double>(i) - y0, dx = static_cast<double>(j) - x0;
      const double base = dy * dy + dx * dx <= r * r ? kSyntheticForeground : kSyntheticBackground;
      out[i * cfg.resolution + j] = std::clamp(std::round(base + kSyntheticNoise * irng.normal()), 0.0, 255.0);
    }
  return out;
}

DatasetManifest generate_synthetic(const SyntheticConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  const fs::path root(out_dir);
  fs::create_directories(root / "images");
  DatasetManifest m;
  m.base_dir = out_dir;
  for (std::size_t c = 0; c < cfg.classes; ++c) m.class_names.push_back("class" + std::to_string(c));
  for (std::size_t c = 0; c < cfg.classes; ++c)
    for (std::size_t p = 0; p < cfg.patients_per_class; ++p) {
      char pid[32];
      std::snprintf(pid, sizeof pid, "p%04zu", c * cfg.patients_per_class + p);
      for (std::size_t i = 0; i < cfg.images_per_patient; ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "images/%s_%03zu.pgm", pid, i);
        write_image((root / name).string(), synthetic_image(cfg, c, p, i));
        m.records.push_back(ImageRecord{name, pid, c});
      }
    }
  std::ofstream out(root / "manifest.csv");
  if (!out) throw std::runtime_error("cannot write manifest in '" + out_dir + "'");
  out << print_manifest(m);
  if (!out) throw std::runtime_error("manifest write failed in '" + out_dir + "'");
  return m;
}

std::size_t synthetic_oracle(const Tensor& image, std::size_t classes) {
  const double threshold = (kSyntheticForeground + kSyntheticBackground) / 2;
  const double res = std::sqrt(static_cast<double>(image.size()));
  double bright = 0;
  for (double v : image.data()) bright += v > threshold ? 1 : 0;
  std::size_t best = 0;
  double best_gap = INFINITY;
  for (std::size_t c = 0; c < classes; ++c) {
    const double r = synthetic_radius_fraction(c, classes) * res;
    const double gap = std::abs(std::log(std::max(bright, 1.0)) - std::log(std::acos(-1.0) * r * r));
    if (gap < best_gap) best_gap = gap, best = c;
  }
  return best;
}

std::vector<Tensor> load_images(const DatasetManifest& m, std::size_t resolution) {
  std::vector<Tensor> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) out.push_back(resize(read_image(m.resolve(r)), resolution, resolution));
  return out;
}

}  // namespace ctnet::data
