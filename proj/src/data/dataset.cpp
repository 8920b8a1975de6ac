#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mlad/data.hpp"
#include "mlad/errors.hpp"
#include "mlad/rng.hpp"

namespace mlad {

namespace fs = std::filesystem;

std::vector<std::size_t> MultimodalDataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t y : labels) {
    if (y >= num_classes) throw IndexError("label out of range");
    ++counts[y];
  }
  return counts;
}

std::vector<std::vector<std::size_t>> MultimodalDataset::class_indices() const {
  std::vector<std::vector<std::size_t>> idx(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw IndexError("label out of range");
    idx[labels[i]].push_back(i);
  }
  return idx;
}

MultimodalDataset MultimodalDataset::subset(std::span<const std::size_t> idx) const {
  MultimodalDataset out;
  out.modality_names = modality_names;
  out.num_classes = num_classes;
  out.labels.reserve(idx.size());
  for (std::size_t i : idx) {
    if (i >= labels.size()) throw IndexError("subset: row index out of range");
    out.labels.push_back(labels[i]);
  }
  for (const Mat& f : features) out.features.push_back(select_rows(f, idx));
  return out;
}

void MultimodalDataset::validate(bool require_two_per_class) const {
  if (features.empty()) throw ValidationError("dataset has no modalities");
  if (modality_names.size() != features.size())
    throw ValidationError("modality name count does not match feature matrices");
  if (num_classes == 0) throw ValidationError("dataset declares zero classes");
  for (std::size_t m = 0; m < features.size(); ++m) {
    if (features[m].rows() != labels.size())
      throw ValidationError("modality '" + modality_names[m] + "' has " +
                            std::to_string(features[m].rows()) + " rows but there are " +
                            std::to_string(labels.size()) + " labels");
    if (features[m].cols() == 0) throw ValidationError("modality with zero features");
    require_finite(features[m], "modality '" + modality_names[m] + "'");
  }
  for (std::size_t y : labels)
    if (y >= num_classes)
      throw ValidationError("label " + std::to_string(y) + " >= num_classes " +
                            std::to_string(num_classes));
  if (require_two_per_class) {
    const auto counts = class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c)
      if (counts[c] < 2)
        throw ValidationError("class " + std::to_string(c) + " has fewer than 2 samples");
  }
}

FeatureStats FeatureStats::fit(const MultimodalDataset& train) {
  FeatureStats st;
  for (const Mat& f : train.features) {
    Vec mu = column_mean(f);
    Vec var = column_var(f, mu);
    Vec sd(var.size()), lo(f.cols(), f.rows() ? f(0, 0) : 0.0), hi(f.cols(), 0.0);
    for (std::size_t j = 0; j < var.size(); ++j) sd[j] = std::max(std::sqrt(var[j]), 1e-12);
    for (std::size_t j = 0; j < f.cols(); ++j) {
      lo[j] = hi[j] = f.rows() ? f(0, j) : 0.0;
      for (std::size_t i = 1; i < f.rows(); ++i) {
        lo[j] = std::min(lo[j], f(i, j));
        hi[j] = std::max(hi[j], f(i, j));
      }
    }
    st.mean.push_back(std::move(mu));
    st.std.push_back(std::move(sd));
    st.min.push_back(std::move(lo));
    st.max.push_back(std::move(hi));
  }
  return st;
}

MultimodalDataset FeatureStats::normalize(const MultimodalDataset& ds) const {
  if (ds.num_modalities() != mean.size())
    throw DimensionError("normalize: modality count mismatch");
  MultimodalDataset out = ds;
  for (std::size_t m = 0; m < out.features.size(); ++m) {
    Mat& f = out.features[m];
    if (f.cols() != mean[m].size()) throw DimensionError("normalize: feature width mismatch");
    for (std::size_t i = 0; i < f.rows(); ++i) {
      auto r = f.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - mean[m][j]) / std[m][j];
    }
  }
  return out;
}

Split stratified_split(const MultimodalDataset& ds, double train_frac, double val_frac,
                       std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0) || !(val_frac > 0.0 && val_frac < 1.0) ||
      train_frac + val_frac >= 1.0)
    throw ValidationError("stratified_split: fractions must lie in (0,1) and sum below 1");
  Rng rng = Rng::stream(seed, "split");
  Split s;
  const auto by_class = ds.class_indices();
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto idx = by_class[c];
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::floor(train_frac * n + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(val_frac * n + 1e-9));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= idx.size())
      throw ValidationError("stratified_split: class " + std::to_string(c) + " has only " +
                            std::to_string(idx.size()) + " samples, too few to split");
    rng.shuffle(std::span<std::size_t>(idx));
    s.train.insert(s.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.insert(s.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                 idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.insert(s.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                  idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

Mat read_csv_matrix(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t count = 0;
    const char* p = line.data();
    const char* end = p + line.size();
    while (true) {
      while (p < end && *p == ' ') ++p;
      double v = 0.0;
      auto [next, ec] = std::from_chars(p, end, v);
      if (ec != std::errc() || next == p)
        throw ValidationError(path.string() + ": non-numeric cell on line " +
                              std::to_string(rows + 1));
      values.push_back(v);
      ++count;
      p = next;
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      if (*p != ',')
        throw ValidationError(path.string() + ": non-numeric cell on line " +
                              std::to_string(rows + 1));
      ++p;
    }
    if (rows == 0) cols = count;
    if (count != cols)
      throw ValidationError(path.string() + ": ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  return Mat(rows, cols, std::move(values));
}

void write_csv_matrix(const Mat& m, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  char buf[40];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

MultimodalDataset load_dataset(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + manifest.string() + ": " + e.what());
  }
  const fs::path base = manifest.parent_path();
  MultimodalDataset ds;
  try {
    ds.num_classes = doc.at("num_classes").get<std::size_t>();
    for (const auto& mod : doc.at("modalities")) {
      ds.modality_names.push_back(mod.at("name").get<std::string>());
      ds.features.push_back(read_csv_matrix(base / mod.at("path").get<std::string>()));
    }
    const Mat labels = read_csv_matrix(base / doc.at("labels").get<std::string>());
    if (labels.cols() != 1) throw ValidationError("labels file must have a single column");
    for (double v : labels.flat()) {
      if (v < 0.0 || v != std::floor(v)) throw ValidationError("labels must be class indices");
      ds.labels.push_back(static_cast<std::size_t>(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + manifest.string() + ": " + e.what());
  }
  ds.validate();
  return ds;
}

void write_dataset(const MultimodalDataset& ds, const fs::path& dir,
                   const std::string& manifest_name) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json doc;
  doc["num_classes"] = ds.num_classes;
  doc["modalities"] = nlohmann::json::array();
  for (std::size_t m = 0; m < ds.num_modalities(); ++m) {
    const std::string file = ds.modality_names[m] + ".csv";
    write_csv_matrix(ds.features[m], dir / file);
    doc["modalities"].push_back({{"name", ds.modality_names[m]}, {"path", file}});
  }
  Mat labels(ds.size(), 1);
  for (std::size_t i = 0; i < ds.size(); ++i) labels(i, 0) = static_cast<double>(ds.labels[i]);
  write_csv_matrix(labels, dir / "labels.csv");
  doc["labels"] = "labels.csv";
  std::ofstream out(dir / manifest_name, std::ios::binary);
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << doc.dump(2) << '\n';
}

}  // namespace mlad
