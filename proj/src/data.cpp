/* Copyright 2026 The divens Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "divens/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "divens/errors.hpp"

namespace divens {

void Dataset::validate(bool require_all_classes) const {
  if (inputs.rows() != labels.size()) {
    throw ConfigError("dataset '" + name + "': input rows do not match label count");
  }
  std::vector<bool> seen(classes, false);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ConfigError("dataset '" + name + "': label out of range");
    }
    seen[static_cast<std::size_t>(y)] = true;
  }
  if (require_all_classes && !std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) {
    throw ConfigError("dataset '" + name + "': some class has no samples");
  }
  for (double v : inputs.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ConfigError("dataset '" + name + "': inputs outside [0, 1]");
    }
  }
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.classes = ds.classes;
  out.name = ds.name;
  out.inputs = Matrix(indices.size(), ds.dim());
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = ds.inputs.row(indices[i]);
    std::copy(src.begin(), src.end(), out.inputs.row(i).begin());
    out.labels.push_back(ds.labels[indices[i]]);
  }
  return out;
}

namespace {

// Fisher-Yates with the given stream.
void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(v[i - 1], v[j]);
  }
}

// Per-feature min-max rescale into [0, 1]; constant features map to 0.5.
void rescale_unit(Matrix& x) {
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double lo = x.rows() ? x(0, c) : 0.0;
    double hi = lo;
    for (std::size_t r = 0; r < x.rows(); ++r) {
      lo = std::min(lo, x(r, c));
      hi = std::max(hi, x(r, c));
    }
    const double span = hi - lo;
    for (std::size_t r = 0; r < x.rows(); ++r)
      x(r, c) = span > 0.0 ? std::clamp((x(r, c) - lo) / span, 0.0, 1.0) : 0.5;
  }
}

}  // namespace

DatasetSplit split_dataset(const Dataset& ds, double val_fraction, double test_fraction,
                           std::uint64_t seed) {
  if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0) {
    throw ConfigError("split fractions must be >= 0 and sum to < 1");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  Rng root = Rng(seed).split("split");
  std::vector<std::size_t> train, val, test;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    auto& idx = by_class[c];
    Rng rng = root.split(c);
    shuffle(idx, rng);
    const auto n_val = static_cast<std::size_t>(std::floor(idx.size() * val_fraction));
    const auto n_test = static_cast<std::size_t>(std::floor(idx.size() * test_fraction));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (i < n_val) val.push_back(idx[i]);
      else if (i < n_val + n_test) test.push_back(idx[i]);
      else train.push_back(idx[i]);
    }
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  std::sort(test.begin(), test.end());
  DatasetSplit out{subset(ds, train), subset(ds, val), subset(ds, test)};
  out.train.name = ds.name + "/train";
  out.val.name = ds.name + "/val";
  out.test.name = ds.name + "/test";
  return out;
}

Dataset make_blobs(const BlobSpec& spec) {
  if (spec.classes < 2) throw ConfigError("make_blobs needs >= 2 classes");
  if (spec.dim < 2) throw ConfigError("make_blobs needs dim >= 2");
  if (spec.per_class < 1) throw ConfigError("make_blobs needs per_class >= 1");
  Rng center_rng = Rng(spec.center_seed).split("blob-centers");
  Matrix centers(spec.classes, spec.dim);
  for (double& v : centers.data()) v = spec.center_scale * center_rng.normal();

  Rng rng = Rng(spec.seed).split("blob-samples");
  const std::size_t n = spec.classes * spec.per_class;
  Dataset ds;
  ds.classes = spec.classes;
  ds.name = "blobs";
  ds.inputs = Matrix(n, spec.dim);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % spec.classes;
    ds.labels[i] = static_cast<int>(c);
    for (std::size_t d = 0; d < spec.dim; ++d)
      ds.inputs(i, d) = centers(c, d) + spec.spread * rng.normal();
  }
  rescale_unit(ds.inputs);
  return ds;
}

Dataset make_rings(std::size_t classes, std::size_t per_class, double noise,
                   std::uint64_t seed) {
  if (classes < 2) throw ConfigError("make_rings needs >= 2 classes");
  if (per_class < 1) throw ConfigError("make_rings needs per_class >= 1");
  Rng rng = Rng(seed).split("rings");
  const std::size_t n = classes * per_class;
  Dataset ds;
  ds.classes = classes;
  ds.name = "rings";
  ds.inputs = Matrix(n, 2);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    const double radius = static_cast<double>(c + 1) + noise * rng.normal();
    ds.labels[i] = static_cast<int>(c);
    ds.inputs(i, 0) = radius * std::cos(angle);
    ds.inputs(i, 1) = radius * std::sin(angle);
  }
  rescale_unit(ds.inputs);
  return ds;
}

std::string to_string(CorruptionFamily f) {
  switch (f) {
    case CorruptionFamily::gaussian_noise: return "gaussian_noise";
    case CorruptionFamily::feature_dropout: return "feature_dropout";
    case CorruptionFamily::contrast_scale: return "contrast_scale";
    case CorruptionFamily::smooth_blur: return "smooth_blur";
  }
  return "?";
}

CorruptionFamily parse_corruption(const std::string& text) {
  for (CorruptionFamily f : all_corruptions())
    if (to_string(f) == text) return f;
  throw ConfigError("unknown corruption '" + text + "'");
}

std::vector<CorruptionFamily> all_corruptions() {
  return {CorruptionFamily::gaussian_noise, CorruptionFamily::feature_dropout,
          CorruptionFamily::contrast_scale, CorruptionFamily::smooth_blur};
}

double corruption_severity(CorruptionFamily kind, int level) {
  if (level < 1 || level > 5) {
    throw ConfigError("corruption level must be in [1, 5], got " + std::to_string(level));
  }
  static constexpr std::array<double, 5> kNoise{0.02, 0.04, 0.08, 0.16, 0.32};
  static constexpr std::array<double, 5> kDropout{0.05, 0.1, 0.2, 0.3, 0.4};
  static constexpr std::array<double, 5> kContrast{0.9, 0.75, 0.6, 0.45, 0.3};
  const auto i = static_cast<std::size_t>(level - 1);
  switch (kind) {
    case CorruptionFamily::gaussian_noise: return kNoise[i];
    case CorruptionFamily::feature_dropout: return kDropout[i];
    case CorruptionFamily::contrast_scale: return kContrast[i];
    case CorruptionFamily::smooth_blur: return static_cast<double>(level);
  }
  return 0.0;
}

Dataset corrupt(const Dataset& ds, const Corruption& c, std::uint64_t seed) {
  const double scheduled = corruption_severity(c.kind, c.level);
  const double severity = c.severity_override.value_or(scheduled);
  Dataset out = ds;
  out.name = ds.name + ":" + to_string(c.kind) + ":" + std::to_string(c.level);
  Rng rng = Rng(seed).split(to_string(c.kind)).split(static_cast<std::uint64_t>(c.level));
  Matrix& x = out.inputs;
  switch (c.kind) {
    case CorruptionFamily::gaussian_noise:
      for (double& v : x.data()) v = std::clamp(v + severity * rng.normal(), 0.0, 1.0);
      break;
    case CorruptionFamily::feature_dropout:
      for (double& v : x.data())
        if (rng.uniform() < severity) v = 0.5;
      break;
    case CorruptionFamily::contrast_scale:
      for (double& v : x.data()) v = std::clamp(0.5 + severity * (v - 0.5), 0.0, 1.0);
      break;
    case CorruptionFamily::smooth_blur: {
      const auto passes = static_cast<int>(std::lround(severity));
      const std::size_t dim = x.cols();
      std::vector<double> next(dim);
      for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row(r);
        for (int p = 0; p < passes && dim > 1; ++p) {
          // Circular [1/4, 1/2, 1/4] kernel over neighbouring feature indices.
          // Its spectrum lies in [0, 1], so each pass moves further from the
          // input.
          for (std::size_t i = 0; i < dim; ++i)
            next[i] = 0.25 * row[(i + dim - 1) % dim] + 0.5 * row[i] + 0.25 * row[(i + 1) % dim];
          std::copy(next.begin(), next.end(), row.begin());
        }
        for (double& v : row) v = std::clamp(v, 0.0, 1.0);
      }
      break;
    }
  }
  return out;
}

Matrix sample_uniform_ood(std::size_t dim, std::size_t n, Rng& rng) {
  if (n < 1) throw ConfigError("sample_uniform_ood needs n >= 1");
  Matrix x(n, dim);
  for (double& v : x.data()) v = rng.uniform();
  return x;
}

Matrix sample_uniform_ood(std::size_t dim, std::size_t n, std::uint64_t seed) {
  Rng rng = Rng(seed).split("uniform-ood");
  return sample_uniform_ood(dim, n, rng);
}

Matrix fgsm_perturb(const EnsembleModel& model, const RegularizerSpec& reg,
                    const Matrix& x, double epsilon) {
  if (epsilon < 0.0) throw ConfigError("fgsm epsilon must be >= 0");
  if (epsilon == 0.0) return x;
  const RegularizerSpec* sd = &reg;
  while (sd && sd->kind != RegKind::sample_diversity) sd = sd->combine_with.get();
  if (!sd) throw ConfigError("fgsm_perturb needs a sample_diversity regularizer");

  ad::Tape tape;
  BoundModel bound = bind(tape, model, /*trainable=*/false);
  ad::Var input = tape.parameter(x);
  ad::Var score = sample_diversity(bound, input, sd->jitter, sd->use_chi2_variant,
                                   sd->chi2_literal);
  tape.backward(score);
  Matrix out = x;
  auto g = input.grad().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double step = g[i] > 0.0 ? epsilon : (g[i] < 0.0 ? -epsilon : 0.0);
    o[i] = std::clamp(o[i] + step, 0.0, 1.0);
  }
  return out;
}

Dataset parse_cifar10_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::uint64_t full = bytes.size() / kCifarRecordBytes;
    throw FormatError("truncated CIFAR-10 record: file length " +
                          std::to_string(bytes.size()) + " is not a multiple of " +
                          std::to_string(kCifarRecordBytes),
                      full * kCifarRecordBytes);
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset ds;
  ds.classes = 10;
  ds.name = "cifar10";
  ds.inputs = Matrix(n, kCifarImageBytes);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t offset = i * kCifarRecordBytes;
    const std::uint8_t label = bytes[offset];
    if (label >= 10) {
      throw FormatError("CIFAR-10 label " + std::to_string(label) + " >= 10", offset);
    }
    ds.labels[i] = label;
    auto row = ds.inputs.row(i);
    for (std::size_t p = 0; p < kCifarImageBytes; ++p)
      row[p] = static_cast<double>(bytes[offset + 1 + p]) / 255.0;
  }
  return ds;
}

Dataset read_cifar10_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return parse_cifar10_binary(bytes);
}

void write_dataset_csv(const Dataset& ds, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw Error("cannot open '" + path + "' for writing");
  std::fputs("label", f);
  for (std::size_t d = 0; d < ds.dim(); ++d) std::fprintf(f, ",f%zu", d);
  std::fputc('\n', f);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::fprintf(f, "%d", ds.labels[i]);
    for (double v : ds.inputs.row(i)) std::fprintf(f, ",%.6g", v);
    std::fputc('\n', f);
  }
  std::fclose(f);
}

}  // namespace divens
