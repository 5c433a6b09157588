// Python bindings: hashing primitives, the memory-layer forward pass and the
// FLOPs / storage accountant. Arrays are float64.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "memoryformer/accounting.h"
#include "memoryformer/gradcheck.h"
#include "memoryformer/memory_layer.h"
#include "memoryformer/version.h"

namespace py = pybind11;
using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

namespace {

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

mf::Tensor<double> to_tensor(const Array& a) {
  mf::Shape shape(a.shape(), a.shape() + a.ndim());
  return mf::Tensor<double>(std::move(shape), to_vector(a));
}

Array to_array(const mf::Tensor<double>& t) {
  Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::dict flops_dict(const mf::FlopsReport& r) {
  py::dict d;
  d["mode"] = r.mode;
  d["qkv"] = r.qkv;
  d["output_projection"] = r.output_projection;
  d["ffn"] = r.ffn;
  d["attention_scores"] = r.attention_scores;
  d["attention_values"] = r.attention_values;
  d["attention"] = r.attention();
  d["non_attention"] = r.non_attention();
  d["total"] = r.total();
  return d;
}

mf::FlopsMode parse_mode(const std::string& m) {
  if (m == "formula") return mf::FlopsMode::formula;
  if (m == "exact") return mf::FlopsMode::exact;
  throw py::value_error("mode must be 'formula' or 'exact'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "memoryformer core bindings";
  m.attr("__version__") = std::string(mf::kVersion);

  py::register_exception<mf::NonFiniteError>(m, "NonFiniteError", PyExc_ValueError);

  m.def("sign_binarize", [](const Array& z) { return mf::sign_binarize<double>(to_vector(z)); }, py::arg("z"));
  m.def("encode_index", [](const std::vector<int>& signs) { return mf::encode_index(signs); }, py::arg("signs"));
  m.def("decode_index", &mf::decode_index, py::arg("index"), py::arg("bits"));
  m.def("hash_chunk", [](const Array& z) { return mf::hash_chunk<double>(to_vector(z)); }, py::arg("z"));
  m.def("bucket_weight", [](const Array& z, double t) { return mf::bucket_weight<double>(to_vector(z), t); },
        py::arg("z"), py::arg("temperature") = 1.0);
  m.def("bucket_weight_naive",
        [](const Array& z, double t) { return mf::bucket_weight_naive<double>(to_vector(z), t); }, py::arg("z"),
        py::arg("temperature") = 1.0);
  m.def("bucket_weight_grad",
        [](const Array& z, double t) { return mf::bucket_weight_grad<double>(to_vector(z), t); }, py::arg("z"),
        py::arg("temperature") = 1.0);

  m.def(
      "memory_forward",
      [](const Array& x, const Array& tables, double temperature) {
        if (x.ndim() != 2 || tables.ndim() != 3) throw py::value_error("x must be [s, d], tables [K, 2^tau, h]");
        const std::size_t d = x.shape(1), K = tables.shape(0), h = tables.shape(2);
        const auto spec = mf::ChunkSpec::from_chunks(d, K);
        if (spec.buckets() != static_cast<std::size_t>(tables.shape(1)))
          throw py::value_error("tables.shape[1] must be 2^(d / K)");
        const mf::HashTableSet<double> params(spec, h, temperature, to_tensor(tables));
        const auto fwd = mf::memory_forward(to_tensor(x), params);
        const std::size_t s = x.shape(0);
        py::array_t<std::uint32_t> indices({s, K});
        std::copy(fwd.trace.indices.begin(), fwd.trace.indices.end(), indices.mutable_data());
        Array weights({s, K});
        std::copy(fwd.trace.weights.begin(), fwd.trace.weights.end(), weights.mutable_data());
        return py::make_tuple(to_array(fwd.output), indices, weights);
      },
      py::arg("x"), py::arg("tables"), py::arg("temperature") = 1.0,
      "Returns (output [s, h], indices [s, K], weights [s, K]).");

  m.def("flops_standard_block", [](std::size_t s, std::size_t d) { return flops_dict(mf::flops_standard_block(s, d)); },
        py::arg("s"), py::arg("d"));
  m.def(
      "flops_memoryformer_block",
      [](std::size_t s, std::size_t d, std::size_t tau, std::size_t K, std::size_t e, const std::string& mode) {
        return flops_dict(mf::flops_memoryformer_block(s, d, tau, K, e, parse_mode(mode)));
      },
      py::arg("s"), py::arg("d"), py::arg("tau"), py::arg("K"), py::arg("expand_bits") = 2,
      py::arg("mode") = "formula");
  m.def("crossover_ratio", &mf::crossover_ratio, py::arg("s"), py::arg("d"), py::arg("tau"));
  m.def("table_memory_bytes", &mf::table_memory_bytes, py::arg("tau"), py::arg("K"), py::arg("h"),
        py::arg("bytes_per_element") = 2);
  m.def(
      "memory_block_bytes",
      [](std::size_t tau, std::size_t K, std::size_t d, std::size_t e, std::size_t bytes) {
        const auto r = mf::memory_block_bytes(tau, K, d, e, bytes);
        return py::make_tuple(r.layer1, r.layer2, r.block());
      },
      py::arg("tau"), py::arg("K"), py::arg("d"), py::arg("expand_bits") = 2, py::arg("bytes_per_element") = 2,
      "Returns (layer1, layer2, block) bytes.");
  m.def(
      "synthetic_bucket_counts",
      [](std::size_t tau, std::size_t samples, std::uint64_t seed) {
        return mf::synthetic_bucket_stats(tau, samples, seed).counts;
      },
      py::arg("tau"), py::arg("samples"), py::arg("seed") = 1);
  m.def(
      "gradcheck",
      [](const std::string& scope, std::size_t seeds, bool inject_bug) {
        mf::GradcheckOptions o;
        o.seeds = seeds;
        o.inject_bug = inject_bug;
        const auto r = mf::run_gradcheck(mf::parse_gradcheck_scope(scope), o);
        py::dict d;
        d["pass"] = r.pass();
        d["worst"] = r.worst;
        d["tolerance"] = r.tolerance;
        d["checked"] = r.checked;
        d["skipped"] = r.skipped;
        return d;
      },
      py::arg("scope"), py::arg("seeds") = 20, py::arg("inject_bug") = false);
}
