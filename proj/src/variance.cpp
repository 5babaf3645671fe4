// SPDX-License-Identifier: Apache-2.0
#include "actc/variance.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace actc {

namespace {

// One gradient flattened per layer.
using FlatGrads = std::vector<std::vector<double>>;

FlatGrads flatten(const ParamGrads& grads) {
  FlatGrads out(grads.size());
  for (size_t l = 0; l < grads.size(); ++l) {
    for (const auto& t : grads[l]) out[l].insert(out[l].end(), t.data().begin(), t.data().end());
  }
  return out;
}

FlatGrads gradient(GraphExecutor& exec, const Batch& batch, LossKind loss, uint32_t step) {
  exec.set_step(step);
  const Tensor pred = exec.forward(batch.inputs);
  return flatten(exec.backward(compute_loss(loss, pred, batch).grad));
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Unbiased per-layer variance of the samples and its standard error.
void summarize(const std::vector<FlatGrads>& samples, std::vector<double>& variance,
               std::vector<double>& std_error) {
  const size_t t = samples.size();
  const size_t layers = samples.front().size();
  variance.assign(layers, 0.0);
  std_error.assign(layers, 0.0);
  for (size_t l = 0; l < layers; ++l) {
    const size_t dim = samples.front()[l].size();
    if (dim == 0) continue;
    std::vector<double> mean(dim, 0.0);
    for (const auto& s : samples) {
      for (size_t i = 0; i < dim; ++i) mean[i] += s[l][i];
    }
    for (auto& m : mean) m /= double(t);
    std::vector<double> dev(t);
    double sum = 0.0;
    for (size_t k = 0; k < t; ++k) sum += dev[k] = sq_dist(samples[k][l], mean);
    const double scale = double(t) / double(t - 1);
    const double avg = sum / double(t);
    double spread = 0.0;
    for (double d : dev) spread += (d - avg) * (d - avg);
    variance[l] = avg * scale;
    std_error[l] = scale * std::sqrt(spread / double(t - 1) / double(t));
  }
}

}  // namespace

double VarianceEstimate::total() const {
  double s = 0.0;
  for (double v : variance) s += v;
  return s;
}

double VarianceEstimate::total_std_error() const {
  double s = 0.0;
  for (double e : std_error) s += e * e;
  return std::sqrt(s);
}

VarianceEstimate empirical_variance(GraphExecutor& exec, const Batch& batch, LossKind loss,
                                    size_t trials, uint32_t first_step) {
  if (trials < 2) throw std::invalid_argument("variance needs at least 2 trials");
  const uint32_t saved_step = exec.step();
  std::vector<FlatGrads> samples;
  samples.reserve(trials);
  for (size_t t = 0; t < trials; ++t) {
    samples.push_back(gradient(exec, batch, loss, first_step + uint32_t(t)));
  }
  exec.set_step(saved_step);
  VarianceEstimate est;
  est.trials = trials;
  summarize(samples, est.variance, est.std_error);
  return est;
}

std::vector<double> VarianceReport::decomposed_total() const {
  std::vector<double> out = sampling;
  for (const auto& row : quantization) {
    for (size_t j = 0; j < out.size(); ++j) out[j] += row[j];
  }
  return out;
}

std::string VarianceReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(9) << "source";
  for (size_t l : param_layers) os << ",layer" << l;
  os << '\n';
  for (size_t m = 0; m < sources.size(); ++m) {
    os << "layer" << sources[m];
    for (double v : quantization[m]) os << ',' << v;
    os << '\n';
  }
  os << "sampling";
  for (double v : sampling) os << ',' << v;
  os << "\ndecomposed_total";
  for (double v : decomposed_total()) os << ',' << v;
  os << "\nmeasured_total";
  for (double v : total) os << ',' << v;
  os << '\n';
  return os.str();
}

VarianceReport decompose_variance(GraphExecutor& exec, const BatchSource& source, LossKind loss,
                                  size_t trials, size_t batches) {
  if (trials < 2 || batches < 2) {
    throw std::invalid_argument("decomposition needs at least 2 trials and 2 batches");
  }
  const ContextMode saved_mode = exec.mode();
  const std::vector<bool> saved_mask = exec.compress_mask();
  const uint32_t saved_step = exec.step();

  VarianceReport r;
  r.trials = trials;
  r.batches = batches;
  r.seed = exec.seed();
  for (size_t l = 0; l < exec.size(); ++l) {
    if (!exec.layer(l).params().empty()) r.param_layers.push_back(l);
    if (exec.layer(l).quantizes_input() && saved_mask[l]) r.sources.push_back(l);
  }

  std::vector<Batch> pool;
  pool.reserve(batches);
  for (size_t b = 0; b < batches; ++b) pool.push_back(source(b));

  exec.set_mode(ContextMode::kFullPrecision);
  std::vector<FlatGrads> fp;
  fp.reserve(batches);
  for (const auto& b : pool) fp.push_back(gradient(exec, b, loss, 0));
  // Trials visit the pool uniformly, so the sampling term is the population
  // variance over the pool.
  {
    std::vector<double> var, se;
    summarize(fp, var, se);
    for (size_t l : r.param_layers) r.sampling.push_back(var[l] * double(batches - 1) / double(batches));
  }

  exec.set_mode(ContextMode::kCompressed);
  for (size_t m : r.sources) {
    exec.compress_only(m);
    std::vector<double> acc(exec.size(), 0.0);
    for (size_t t = 0; t < trials; ++t) {
      const size_t b = t % batches;
      const FlatGrads g = gradient(exec, pool[b], loss, uint32_t(t));
      for (size_t l : r.param_layers) acc[l] += sq_dist(g[l], fp[b][l]);
    }
    std::vector<double> row;
    for (size_t l : r.param_layers) row.push_back(acc[l] / double(trials));
    r.quantization.push_back(std::move(row));
  }

  exec.set_compress_mask(saved_mask);
  std::vector<FlatGrads> all;
  all.reserve(trials);
  for (size_t t = 0; t < trials; ++t) all.push_back(gradient(exec, pool[t % batches], loss, uint32_t(t)));
  {
    std::vector<double> var, se;
    summarize(all, var, se);
    for (size_t l : r.param_layers) {
      r.total.push_back(var[l]);
      r.total_std_error.push_back(se[l]);
    }
  }

  exec.set_mode(saved_mode);
  exec.set_step(saved_step);
  return r;
}

double approx_objective(const std::vector<SensitivityStats>& stats,
                        const std::vector<std::vector<uint8_t>>& bits) {
  std::vector<std::vector<double>> w;
  for (const auto& s : stats) w.push_back(s.weight);
  return objective(w, bits);
}

// ---------------------------------------------------------------------------
// Heterogeneity

LogHistogram LogHistogram::of(std::span<const double> values) {
  LogHistogram h;
  int lo = 0, hi = -1;
  for (double v : values) {
    if (v <= 0.0) continue;
    const int d = int(std::floor(std::log10(v)));
    if (hi < lo) {
      lo = hi = d;
    } else {
      lo = std::min(lo, d);
      hi = std::max(hi, d);
    }
  }
  h.first_decade = lo;
  if (hi >= lo) h.counts.assign(size_t(hi - lo + 1), 0);
  for (double v : values) {
    if (v <= 0.0) {
      ++h.zeros;
    } else {
      ++h.counts[size_t(int(std::floor(std::log10(v))) - lo)];
    }
  }
  return h;
}

size_t LogHistogram::decades_spanned() const {
  const auto first = std::find_if(counts.begin(), counts.end(), [](size_t c) { return c > 0; });
  if (first == counts.end()) return 0;
  const auto last = std::find_if(counts.rbegin(), counts.rend(), [](size_t c) { return c > 0; });
  return size_t(std::distance(first, last.base()));
}

namespace {

void histogram_rows(std::ostringstream& os, size_t layer, std::span<const double> values) {
  const LogHistogram h = LogHistogram::of(values);
  os << layer << ",0,0," << h.zeros << '\n';
  for (size_t k = 0; k < h.counts.size(); ++k) {
    os << layer << ",1e" << (h.first_decade + int(k)) << ",1e" << (h.first_decade + int(k) + 1)
       << ',' << h.counts[k] << '\n';
  }
}

}  // namespace

std::string HeterogeneityReport::range_histogram_csv() const {
  std::ostringstream os;
  os << "layer,bin_lo,bin_hi,count\n";
  for (const auto& l : layers) histogram_rows(os, l.layer, l.group_ranges);
  return os.str();
}

std::string HeterogeneityReport::sample_sensitivity_csv() const {
  std::ostringstream os;
  os << "layer,bin_lo,bin_hi,count\n";
  for (const auto& l : layers) histogram_rows(os, l.layer, l.sample_sensitivity);
  return os.str();
}

std::string HeterogeneityReport::layer_sensitivity_csv() const {
  std::ostringstream os;
  os << std::setprecision(9) << "layer,kind,dims,sensitivity_per_dim\n";
  for (const auto& l : layers) {
    os << l.layer << ',' << to_string(l.kind) << ',' << l.dims << ',' << l.sensitivity_per_dim
       << '\n';
  }
  return os.str();
}

HeterogeneityReport heterogeneity_report(GraphExecutor& exec, const Batch& batch, LossKind loss) {
  const BitChooser keep8 = [](const CompressionRequest& req) {
    return std::vector<uint8_t>(req.range_sq.size(), uint8_t{8});
  };
  HeterogeneityReport report;
  Tensor h = batch.inputs;
  for (size_t i = 0; i < exec.size(); ++i) {
    Layer& layer = exec.layer(i);
    ForwardOptions opt;
    opt.layer_index = i;
    opt.compress = layer.quantizes_input();
    opt.group_size = exec.group_size();
    opt.key = QuantKey{exec.seed(), exec.step(), uint32_t(i), 0};
    opt.choose_bits = &keep8;
    if (layer.quantizes_input()) {
      LayerHeterogeneity entry;
      entry.layer = i;
      entry.kind = layer.kind();
      entry.dims = h.sample_size();
      const GroupRanges ranges = measure_group_ranges(h, exec.group_size());
      entry.group_ranges.assign(ranges.ranges.begin(), ranges.ranges.end());
      report.layers.push_back(std::move(entry));
    }
    h = layer.forward(h, opt);
  }
  Tensor g = compute_loss(loss, h, batch).grad;
  for (size_t i = exec.size(); i-- > 0;) g = exec.layer(i).backward(g);
  for (auto& entry : report.layers) {
    const Layer& layer = exec.layer(entry.layer);
    entry.sample_sensitivity = layer.sensitivity(layer.observed_grad_sq()).weight;
    double sum = 0.0;
    for (double w : entry.sample_sensitivity) sum += w;
    entry.sensitivity_per_dim = sum / double(entry.dims);
  }
  return report;
}

}  // namespace actc
