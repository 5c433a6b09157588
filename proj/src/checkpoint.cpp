#include "memoryformer/checkpoint.h"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "memoryformer/binary_io.h"

namespace mf {

namespace fs = std::filesystem;

namespace {

fs::path param_path(const fs::path& dir, const ParamRef<float>& p) {
  return dir / "params" / (p.name + (p.kind == ParamKind::table ? ".mfht" : ".mftn"));
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return in;
}

}  // namespace

fs::path checkpoint_dir(const fs::path& run_dir, std::uint64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%08llu", static_cast<unsigned long long>(step));
  return run_dir / "checkpoints" / name;
}

void save_checkpoint(const fs::path& dir, const RunConfig& cfg, std::uint64_t step, LanguageModel<float>& model,
                     const AdamW<float>* optimizer) {
  fs::create_directories(dir / "params");
  auto params = model.parameters();
  {
    auto out = open_out(dir / "manifest.cfg");
    out << "[checkpoint]\nformat = " << kCheckpointFormat << "\nstep = " << step
        << "\nparameters = " << params.size() << "\n\n";
    write_run_config(out, cfg);
  }
  for (const auto& p : params) {
    auto out = open_out(param_path(dir, p));
    if (p.kind == ParamKind::table) {
      write_tables(out, *p.tables);
    } else {
      io::write_tensor(out, *p.value);
    }
  }
  if (optimizer) {
    auto out = open_out(dir / "optimizer.bin");
    optimizer->save(out, params);
  }
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.cfg";
  if (!fs::exists(manifest)) throw std::runtime_error("no checkpoint at " + dir.string());
  auto in = open_in(manifest);
  std::stringstream text;
  text << in.rdbuf();
  boost::property_tree::ptree tree;
  boost::property_tree::read_ini(text, tree);
  if (tree.get<std::uint32_t>("checkpoint.format", 0) != kCheckpointFormat) {
    throw std::runtime_error("checkpoint " + dir.string() + ": unsupported format");
  }
  CheckpointInfo info;
  info.step = tree.get<std::uint64_t>("checkpoint.step");
  text.clear();
  text.seekg(0);
  info.config = parse_run_config(text, dir);
  return info;
}

CheckpointInfo load_checkpoint(const fs::path& dir, LanguageModel<float>& model, AdamW<float>* optimizer) {
  CheckpointInfo info = read_checkpoint_info(dir);
  auto params = model.parameters();
  for (auto& p : params) {
    auto in = open_in(param_path(dir, p));
    if (p.kind == ParamKind::table) {
      HashTableSet<float> t = read_tables(in);
      if (!(t.spec() == p.tables->spec()) || t.out_dim() != p.tables->out_dim()) {
        throw std::runtime_error("checkpoint: table shape mismatch for " + p.name);
      }
      *p.tables = std::move(t);
    } else {
      Tensor<float> t = io::read_tensor(in);
      if (t.shape() != p.value->shape()) throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
      *p.value = std::move(t);
    }
  }
  if (optimizer) {
    auto in = open_in(dir / "optimizer.bin");
    optimizer->load(in, params);
  }
  return info;
}

fs::path latest_checkpoint(const fs::path& run_dir) {
  const fs::path root = run_dir / "checkpoints";
  if (!fs::is_directory(root)) return {};
  fs::path best;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!fs::exists(entry.path() / "manifest.cfg")) continue;
    if (best.empty() || entry.path().filename() > best.filename()) best = entry.path();
  }
  return best;
}

}  // namespace mf
