// SPDX-License-Identifier: Apache-2.0
#include "actc/harness/memory.hpp"

#include <iomanip>
#include <sstream>

#include "actc/harness/dataset.hpp"
#include "actc/harness/levels.hpp"
#include "actc/harness/train.hpp"

namespace actc {

namespace {

double charged(const ContextBits& b) { return b.aliases_output ? 0.0 : double(b.total()); }

double per_element(const ContextBits& b) {
  return b.elements == 0 ? 0.0 : charged(b) / double(b.elements);
}

}  // namespace

double LayerMemory::full_per_element() const { return per_element(full); }
double LayerMemory::compressed_per_element() const { return per_element(compressed); }

MemoryReport memory_report(GraphExecutor& exec, const Batch& batch) {
  MemoryReport r;
  exec.forward(batch.inputs);
  const auto compressed = exec.context_bits();
  const ContextMode saved = exec.mode();
  exec.set_mode(ContextMode::kFullPrecision);
  exec.forward(batch.inputs);
  const auto full = exec.context_bits();
  exec.release_contexts();
  exec.set_mode(saved);

  for (size_t i = 0; i < exec.size(); ++i) {
    LayerMemory m{i, exec.layer(i).describe(), full[i], compressed[i]};
    r.full_bits += uint64_t(charged(full[i]));
    r.compressed_bits += uint64_t(charged(compressed[i]));
    r.payload_bits += compressed[i].payload;
    r.metadata_bits += compressed[i].metadata;
    r.serialized_bytes += compressed[i].serialized_bytes;
    r.full_per_element += m.full_per_element();
    r.compressed_per_element += m.compressed_per_element();
    if (compressed[i].elements > 0 && compressed[i].payload > 0) {
      r.payload_per_element += double(compressed[i].payload) / double(compressed[i].elements);
    }
    r.layers.push_back(std::move(m));
  }
  r.ratio = r.compressed_per_element > 0.0 ? r.full_per_element / r.compressed_per_element : 1.0;
  return r;
}

MemoryReport memory_report(const TrainConfig& cfg) {
  validate_config(cfg);
  const DataSplit data = load_dataset(cfg);
  GraphExecutor exec = build_model_for(cfg, data.train);
  exec.set_seed(cfg.seed);
  auto alloc = apply_level(exec, cfg.level, cfg.bits, cfg);
  std::vector<size_t> rows;
  for (size_t i = 0; i < std::min(cfg.batch_size, data.train.size()); ++i) rows.push_back(i);
  const Batch b = make_batch(data.train, rows);
  if (alloc) alloc->begin_step(b.ids);
  return memory_report(exec, b);
}

std::string MemoryReport::to_text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << std::left << std::setw(6) << "layer" << std::setw(22) << "context" << std::right
     << std::setw(12) << "fp b/elem" << std::setw(12) << "act b/elem" << std::setw(14)
     << "payload" << std::setw(12) << "metadata" << '\n';
  for (const auto& l : layers) {
    os << std::left << std::setw(6) << l.layer << std::setw(22) << l.name << std::right
       << std::setw(12) << l.full_per_element() << std::setw(12) << l.compressed_per_element()
       << std::setw(14) << l.compressed.payload << std::setw(12) << l.compressed.metadata << '\n';
  }
  os << "full precision: " << full_per_element << " bits/element (" << full_bits << " bits)\n";
  os << "compressed:     " << compressed_per_element << " bits/element (" << compressed_bits
     << " bits, " << payload_per_element << " excluding metadata)\n";
  os << "serialized:     " << serialized_bytes << " bytes\n";
  os << "ratio:          " << std::setprecision(2) << ratio << '\n';
  return os.str();
}

std::string MemoryReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "layer,context,elements,fp_bits,payload_bits,metadata_bits,lossless_bits,"
        "compressed_bits,serialized_bytes,fp_bits_per_element,compressed_bits_per_element\n";
  for (const auto& l : layers) {
    os << l.layer << ',' << l.name << ',' << l.compressed.elements << ','
       << uint64_t(charged(l.full)) << ',' << l.compressed.payload << ',' << l.compressed.metadata
       << ',' << l.compressed.lossless << ',' << uint64_t(charged(l.compressed)) << ','
       << l.compressed.serialized_bytes << ',' << l.full_per_element() << ','
       << l.compressed_per_element() << '\n';
  }
  os << "total,,," << full_bits << ',' << payload_bits << ',' << metadata_bits << ",,"
     << compressed_bits << ',' << serialized_bytes << ',' << full_per_element << ','
     << compressed_per_element << '\n';
  return os.str();
}

}  // namespace actc
