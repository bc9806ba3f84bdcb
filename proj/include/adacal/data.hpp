#pragma once

// Datasets: synthetic generators, shifts, CSV round trips and split tags.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "adacal/linalg.hpp"
#include "adacal/lora_net.hpp"  // BadConfigError, ParseError
#include "adacal/rng.hpp"

namespace adacal {

class LabelOutOfRangeError : public Error {
  using Error::Error;
};

enum class Split { none, train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "none";
  }
}

struct Dataset {
  std::size_t dim = 0;
  std::size_t n_classes = 0;
  std::vector<double> xs;  // row-major, size() == n() * dim
  std::vector<std::size_t> ys;
  Split split = Split::none;

  std::size_t n() const { return ys.size(); }
  std::span<const double> x(std::size_t i) const {
    return {xs.data() + i * dim, dim};
  }
  void push(std::span<const double> features, std::size_t label) {
    xs.insert(xs.end(), features.begin(), features.end());
    ys.push_back(label);
  }
  Dataset with_split(Split s) const {
    Dataset d = *this;
    d.split = s;
    return d;
  }
};

enum class Generator { gaussians, moons, rings };

inline Generator generator_from_string(const std::string& s) {
  if (s == "gaussians") return Generator::gaussians;
  if (s == "moons") return Generator::moons;
  if (s == "rings") return Generator::rings;
  throw BadConfigError("unknown generator: " + s);
}
inline std::string to_string(Generator g) {
  switch (g) {
    case Generator::gaussians: return "gaussians";
    case Generator::moons: return "moons";
    default: return "rings";
  }
}

struct GenParams {
  std::size_t n_per_class = 50;
  std::size_t n_classes = 4;
  double noise = 1.0;
  double radius = 2.0;  // gaussians: center circle radius; rings: ring spacing
};

// Deterministic in seed, exactly class-balanced. Produces 2-D features.
inline Dataset gen_synthetic(Generator name, const GenParams& p, std::uint64_t seed) {
  if (p.n_per_class == 0) throw BadConfigError("n_per_class must be positive");
  if (p.n_classes < 2) throw BadConfigError("need at least two classes");
  if (name == Generator::moons && p.n_classes != 2)
    throw BadConfigError("moons is a two-class task");
  if (p.noise < 0) throw BadConfigError("noise must be nonnegative");

  Rng rng(seed);
  Dataset ds;
  ds.dim = 2;
  ds.n_classes = p.n_classes;
  const double pi = 3.14159265358979323846;
  for (std::size_t c = 0; c < p.n_classes; ++c) {
    for (std::size_t i = 0; i < p.n_per_class; ++i) {
      double f[2] = {0, 0};
      switch (name) {
        case Generator::gaussians: {
          const double angle = 2.0 * pi * static_cast<double>(c) /
                               static_cast<double>(p.n_classes);
          f[0] = p.radius * std::cos(angle) + p.noise * rng.normal();
          f[1] = p.radius * std::sin(angle) + p.noise * rng.normal();
          break;
        }
        case Generator::moons: {
          const double t = pi * rng.uniform();
          if (c == 0) {
            f[0] = std::cos(t);
            f[1] = std::sin(t);
          } else {
            f[0] = 1.0 - std::cos(t);
            f[1] = 0.5 - std::sin(t);
          }
          f[0] += p.noise * rng.normal();
          f[1] += p.noise * rng.normal();
          break;
        }
        case Generator::rings: {
          const double t = 2.0 * pi * rng.uniform();
          const double r = p.radius * static_cast<double>(c + 1);
          f[0] = r * std::cos(t) + p.noise * rng.normal();
          f[1] = r * std::sin(t) + p.noise * rng.normal();
          break;
        }
      }
      ds.push(std::span<const double>(f, 2), c);
    }
  }
  return ds;
}

// --- shifts ------------------------------------------------------------------

struct ShiftSpec {
  enum class Kind { rotate, translate, scale, feature_noise };
  Kind kind = Kind::rotate;
  std::vector<double> args;  // rotate: degrees; translate: vector;
                             // scale: factor; feature_noise: sigma
  std::uint64_t seed = 0;    // feature_noise only

  std::string label() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::rotate: os << "rotate:"; break;
      case Kind::translate: os << "translate:"; break;
      case Kind::scale: os << "scale:"; break;
      case Kind::feature_noise: os << "noise:"; break;
    }
    for (std::size_t i = 0; i < args.size(); ++i)
      os << (i ? "," : "") << args[i];
    return os.str();
  }
};

// "rotate:30", "translate:4,0", "scale:1.5", "noise:0.5" (optional ":seed")
inline ShiftSpec parse_shift(const std::string& text) {
  ShiftSpec s;
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : text) {
    if (ch == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  if (parts.empty()) throw BadConfigError("empty shift spec");
  const std::string& name = parts[0];
  auto parse_args = [&](const std::string& blob) {
    std::stringstream ss(blob);
    std::string tok;
    while (std::getline(ss, tok, ',')) s.args.push_back(std::stod(tok));
  };
  if (name == "rotate") s.kind = ShiftSpec::Kind::rotate;
  else if (name == "translate") s.kind = ShiftSpec::Kind::translate;
  else if (name == "scale") s.kind = ShiftSpec::Kind::scale;
  else if (name == "noise") s.kind = ShiftSpec::Kind::feature_noise;
  else throw BadConfigError("unknown shift kind: " + name);
  if (parts.size() < 2) throw BadConfigError("shift needs arguments: " + text);
  parse_args(parts[1]);
  if (parts.size() > 2) s.seed = std::stoull(parts[2]);
  if (s.args.empty()) throw BadConfigError("shift needs arguments: " + text);
  return s;
}

inline Dataset apply_shift(const Dataset& ds, const ShiftSpec& shift) {
  Dataset out = ds;
  switch (shift.kind) {
    case ShiftSpec::Kind::rotate: {
      if (ds.dim < 2) throw DimMismatchError("rotate needs >= 2 feature dims");
      const double rad = shift.args[0] * 3.14159265358979323846 / 180.0;
      const double c = std::cos(rad), s = std::sin(rad);
      for (std::size_t i = 0; i < out.n(); ++i) {
        double* row = out.xs.data() + i * out.dim;
        const double x0 = row[0], x1 = row[1];
        row[0] = c * x0 - s * x1;
        row[1] = s * x0 + c * x1;
      }
      break;
    }
    case ShiftSpec::Kind::translate: {
      if (shift.args.size() != ds.dim)
        throw DimMismatchError("translate vector dim mismatch");
      for (std::size_t i = 0; i < out.n(); ++i)
        for (std::size_t j = 0; j < out.dim; ++j)
          out.xs[i * out.dim + j] += shift.args[j];
      break;
    }
    case ShiftSpec::Kind::scale: {
      for (auto& v : out.xs) v *= shift.args[0];
      break;
    }
    case ShiftSpec::Kind::feature_noise: {
      Rng rng(Rng::mix(shift.seed, 0xfeedbeef));
      for (auto& v : out.xs) v += shift.args[0] * rng.normal();
      break;
    }
  }
  return out;
}

// --- CSV ---------------------------------------------------------------------

// Header `x0,...,x{d-1},label`; 17 significant digits for lossless round trips.
inline void save_csv(const Dataset& ds, std::ostream& os) {
  for (std::size_t j = 0; j < ds.dim; ++j) os << 'x' << j << ',';
  os << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.n(); ++i) {
    for (std::size_t j = 0; j < ds.dim; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", ds.xs[i * ds.dim + j]);
      os << buf << ',';
    }
    os << ds.ys[i] << '\n';
  }
}

inline void save_csv_file(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path);
  save_csv(ds, os);
}

// n_classes == 0 infers max(label)+1; otherwise labels are validated against it.
inline Dataset load_csv(std::istream& is, std::size_t n_classes = 0) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty csv (line 1)");
  std::size_t line_no = 1;

  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
  }
  if (cols.size() < 2 || cols.back() != "label")
    throw ParseError("csv header must be x0..x{d-1},label (line 1)");
  const std::size_t dim = cols.size() - 1;
  for (std::size_t j = 0; j < dim; ++j) {
    if (cols[j] != "x" + std::to_string(j))
      throw ParseError("unexpected csv column '" + cols[j] + "' (line 1)");
  }

  Dataset ds;
  ds.dim = dim;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string tok;
    std::vector<double> feats;
    for (std::size_t j = 0; j < dim; ++j) {
      if (!std::getline(ss, tok, ','))
        throw ParseError("missing field at line " + std::to_string(line_no));
      try {
        std::size_t used = 0;
        feats.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw ParseError("bad numeric field '" + tok + "' at line " +
                         std::to_string(line_no));
      }
      if (!std::isfinite(feats.back()))
        throw ParseError("non-finite feature at line " + std::to_string(line_no));
    }
    if (!std::getline(ss, tok, ','))
      throw ParseError("missing label at line " + std::to_string(line_no));
    long label = 0;
    try {
      std::size_t used = 0;
      label = std::stol(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ParseError("bad label '" + tok + "' at line " + std::to_string(line_no));
    }
    if (label < 0 ||
        (n_classes > 0 && static_cast<std::size_t>(label) >= n_classes))
      throw LabelOutOfRangeError("label out of range at line " +
                                 std::to_string(line_no));
    ds.push(feats, static_cast<std::size_t>(label));
  }
  if (ds.n() == 0) throw ParseError("csv has no data rows");
  ds.n_classes = n_classes;
  if (n_classes == 0) {
    for (auto y : ds.ys) ds.n_classes = std::max(ds.n_classes, y + 1);
  }
  return ds;
}

inline Dataset load_csv_file(const std::string& path, std::size_t n_classes = 0) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open csv: " + path);
  return load_csv(is, n_classes);
}

// Deterministic shuffled split; first fraction goes to the first dataset.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double first_frac,
                                                 std::uint64_t seed,
                                                 Split first_tag, Split second_tag) {
  std::vector<std::size_t> idx(ds.n());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = idx.size(); i-- > 1;)
    std::swap(idx[i], idx[rng.uniform_index(i + 1)]);
  const auto n_first =
      static_cast<std::size_t>(std::llround(first_frac * static_cast<double>(ds.n())));
  Dataset a, b;
  a.dim = b.dim = ds.dim;
  a.n_classes = b.n_classes = ds.n_classes;
  a.split = first_tag;
  b.split = second_tag;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    (i < n_first ? a : b).push(ds.x(idx[i]), ds.ys[idx[i]]);
  }
  return {std::move(a), std::move(b)};
}

}  // namespace adacal
