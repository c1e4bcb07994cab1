#include "hamil/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "hamil/error.hpp"

namespace hamil {

Tensor Dataset::sample(std::size_t i) const {
  return Tensor(1, x.cols(), std::vector<double>(x.row_span(i).begin(), x.row_span(i).end()));
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset out;
  out.class_names = class_names;
  out.x = Tensor(idx.size(), x.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto src = x.row_span(idx[k]);
    std::copy(src.begin(), src.end(), out.x.row_span(k).begin());
    out.y.push_back(y[idx[k]]);
  }
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> c(classes(), 0);
  for (auto label : y) ++c.at(label);
  return c;
}

double Dataset::majority_baseline() const {
  if (y.empty()) return 0.0;
  auto c = class_counts();
  return static_cast<double>(*std::max_element(c.begin(), c.end())) / static_cast<double>(y.size());
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  static const char* names[] = {"plane", "car", "bird", "cat", "deer",
                                "dog", "frog", "horse", "ship", "truck"};
  // Look-alike pairs share a group mean.
  static const int group[] = {0, 1, 2, 3, 4, 3, 2, 4, 0, 1};
  static const int side[] = {-1, -1, -1, -1, -1, 1, 1, 1, 1, 1};
  Rng rng(spec.seed);
  const std::size_t d = spec.dim;
  std::vector<std::vector<double>> gmean(5, std::vector<double>(d));
  std::vector<std::vector<double>> gdir(5, std::vector<double>(d));
  for (int g = 0; g < 5; ++g) {
    double nrm = 0;
    for (std::size_t k = 0; k < d; ++k) {
      gmean[g][k] = rng.uniform(0.3, 0.7);
      gdir[g][k] = rng.normal();
      nrm += gdir[g][k] * gdir[g][k];
    }
    for (auto& v : gdir[g]) v /= std::sqrt(nrm);
  }
  const double half_sep = 0.18;
  Dataset ds;
  ds.class_names.assign(std::begin(names), std::end(names));
  ds.x = Tensor(10 * spec.per_class, d);
  std::size_t row = 0;
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t c = 0; c < 10; ++c) {
      for (std::size_t k = 0; k < d; ++k) {
        const double mu = gmean[group[c]][k] + side[c] * half_sep * gdir[group[c]][k];
        ds.x(row, k) = std::clamp(mu + rng.normal(0.0, spec.noise), 0.0, 1.0);
      }
      ds.y.push_back(c);
      ++row;
    }
  }
  return ds;
}

std::pair<Dataset, Dataset> split(const Dataset& d, double test_fraction, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> by_class(d.classes());
  for (std::size_t i = 0; i < d.size(); ++i) by_class[d.y[i]].push_back(i);
  std::vector<std::size_t> train, test;
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    const auto n_test = static_cast<std::size_t>(std::round(test_fraction * static_cast<double>(idx.size())));
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {d.subset(train), d.subset(test)};
}

namespace {

std::vector<std::string> split_line(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep)) {
    auto b = cell.find_first_not_of(" \t\r");
    auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  return out;
}

bool parse_double(const std::string& s, double& v) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    v = std::stod(s, &pos);
  } catch (...) {
    return false;
  }
  return pos == s.size();
}

}  // namespace

Dataset read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read dataset " + path.string());
  std::vector<std::string> fixed_names;
  std::vector<std::vector<double>> rows;
  std::vector<std::string> labels;
  std::string line;
  bool first_data = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    if (line[0] == '#') {
      const std::string key = "# classes:";
      if (line.rfind(key, 0) == 0) fixed_names = split_line(line.substr(key.size()), ',');
      continue;
    }
    auto cells = split_line(line, ',');
    if (cells.size() < 2) throw Error(path.string() + ":" + std::to_string(lineno) + ": need features and a label");
    std::vector<double> feat(cells.size() - 1);
    bool numeric = true;
    for (std::size_t k = 0; k + 1 < cells.size(); ++k) numeric = numeric && parse_double(cells[k], feat[k]);
    if (!numeric) {
      if (first_data) {
        first_data = false;
        continue;  // header
      }
      throw Error(path.string() + ":" + std::to_string(lineno) + ": non-numeric feature");
    }
    first_data = false;
    if (!rows.empty() && feat.size() != rows[0].size()) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": inconsistent column count");
    }
    rows.push_back(std::move(feat));
    labels.push_back(cells.back());
  }
  if (rows.empty()) throw Error("dataset " + path.string() + " has no samples");

  Dataset ds;
  bool all_int = true;
  for (const auto& l : labels) all_int = all_int && !l.empty() && std::all_of(l.begin(), l.end(), ::isdigit);
  std::map<std::string, std::size_t> index;
  if (!fixed_names.empty()) {
    ds.class_names = fixed_names;
    for (std::size_t i = 0; i < fixed_names.size(); ++i) index[fixed_names[i]] = i;
  }
  for (const auto& l : labels) {
    std::size_t label;
    if (index.count(l)) {
      label = index[l];
    } else if (all_int) {
      label = std::stoul(l);
      if (!fixed_names.empty() && label >= fixed_names.size()) throw Error("label index " + l + " out of range");
    } else if (!fixed_names.empty()) {
      throw Error("unknown class label '" + l + "'");
    } else {
      label = index.size();
      index[l] = label;
      ds.class_names.push_back(l);
    }
    ds.y.push_back(label);
  }
  if (ds.class_names.empty()) {
    const std::size_t c = *std::max_element(ds.y.begin(), ds.y.end()) + 1;
    for (std::size_t i = 0; i < c; ++i) ds.class_names.push_back(std::to_string(i));
  }
  ds.x = Tensor(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), ds.x.row_span(i).begin());
  return ds;
}

void write_csv(const std::filesystem::path& path, const Dataset& d) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "# classes: ";
  for (std::size_t i = 0; i < d.classes(); ++i) out << (i ? "," : "") << d.class_names[i];
  out << '\n';
  for (std::size_t k = 0; k < d.dim(); ++k) out << 'f' << k << ',';
  out << "label\n";
  out.precision(17);
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.x.row_span(i)) out << v << ',';
    out << d.class_names[d.y[i]] << '\n';
  }
}

namespace {

// Whitespace-separated PGM tokens, skipping '#' comments.
std::string pgm_token(std::istream& in) {
  std::string tok;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(c);
  }
  return tok;
}

std::vector<double> read_pgm(const std::filesystem::path& p, std::size_t& w, std::size_t& h) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  const std::string magic = pgm_token(in);
  if (magic != "P2" && magic != "P5") throw Error(p.string() + ": not a PGM image");
  w = std::stoul(pgm_token(in));
  h = std::stoul(pgm_token(in));
  const double maxval = std::stod(pgm_token(in));
  if (maxval <= 0 || maxval > 65535) throw Error(p.string() + ": bad maxval");
  std::vector<double> px(w * h);
  if (magic == "P2") {
    for (auto& v : px) v = std::stod(pgm_token(in)) / maxval;
  } else {
    const bool wide = maxval > 255;
    for (auto& v : px) {
      unsigned char b[2] = {0, 0};
      in.read(reinterpret_cast<char*>(b), wide ? 2 : 1);
      if (!in) throw Error(p.string() + ": truncated pixel data");
      v = (wide ? (b[0] << 8 | b[1]) : b[0]) / maxval;
    }
  }
  return px;
}

}  // namespace

Dataset read_image_dir(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw Error(dir.string() + " has no label subfolders");
  Dataset ds;
  std::vector<std::vector<double>> rows;
  std::size_t W = 0, H = 0;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    ds.class_names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c]))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::size_t w, h;
      rows.push_back(read_pgm(f, w, h));
      if (W == 0) {
        W = w;
        H = h;
      } else if (w != W || h != H) {
        throw Error(f.string() + ": image size differs from the rest of the set");
      }
      ds.y.push_back(c);
    }
  }
  if (rows.empty()) throw Error(dir.string() + " contains no .pgm images");
  ds.x = Tensor(rows.size(), W * H);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), ds.x.row_span(i).begin());
  return ds;
}

Dataset load_dataset(const std::filesystem::path& path) {
  if (std::filesystem::is_directory(path)) return read_image_dir(path);
  return read_csv(path);
}

}  // namespace hamil
