#include "memoryformer/optimizer.h"

#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "memoryformer/binary_io.h"

namespace mf {

template <typename T>
double AdamW<T>::group_lr(ParamKind kind, double lr) const {
  return kind == ParamKind::table ? lr * cfg_.table_lr_multiplier : lr;
}

template <typename T>
double AdamW<T>::group_weight_decay(ParamKind kind) const {
  return kind == ParamKind::matrix ? cfg_.weight_decay : 0.0;
}

template <typename T>
void AdamW<T>::ensure_state(const std::vector<ParamRef<T>>& params) {
  if (names_.empty()) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      m_.emplace_back(p.value->shape());
      v_.emplace_back(p.value->shape());
    }
    return;
  }
  if (names_.size() != params.size()) throw std::invalid_argument("AdamW: parameter list changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names_[i] != params[i].name || m_[i].shape() != params[i].value->shape()) {
      throw std::invalid_argument("AdamW: parameter list changed at " + params[i].name);
    }
  }
}

template <typename T>
double AdamW<T>::step(std::vector<ParamRef<T>>& params, double lr) {
  if (!(cfg_.table_lr_multiplier > 0.0)) throw std::invalid_argument("AdamW: table_lr_multiplier must be positive");
  ensure_state(params);
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.grad->values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteError("AdamW: non-finite gradient norm");
  const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const double plr = group_lr(p.kind, lr);
    const double decay = plr * group_weight_decay(p.kind);
    T* w = p.value->data();
    const T* g = p.grad->data();
    T* m = m_[i].data();
    T* v = v_[i].data();
    auto update = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t j = lo; j < hi; ++j) {
        const double gj = clip * g[j];
        m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * gj);
        v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * gj * gj);
        const double step = plr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        w[j] = static_cast<T>(w[j] - step - decay * w[j]);
      }
    };
    if (p.kind == ParamKind::table && cfg_.sparse_table_moments && p.touched) {
      const std::size_t width = p.tables->out_dim();
      for (std::size_t r = 0; r < p.touched->size(); ++r)
        if ((*p.touched)[r]) update(r * width, (r + 1) * width);
    } else {
      update(0, p.value->size());
    }
  }
  return norm;
}

template <typename T>
void AdamW<T>::save(std::ostream& os, const std::vector<ParamRef<T>>& params) const {
  io::write_magic(os, "MFOP");
  io::write_u32(os, 1);
  io::write_u64(os, t_);
  io::write_u32(os, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    io::write_u32(os, static_cast<std::uint32_t>(params[i].name.size()));
    os.write(params[i].name.data(), static_cast<std::streamsize>(params[i].name.size()));
    if (names_.empty()) {
      io::write_tensor(os, Tensor<float>(params[i].value->shape()));
      io::write_tensor(os, Tensor<float>(params[i].value->shape()));
    } else {
      io::write_tensor(os, m_[i].template cast<float>());
      io::write_tensor(os, v_[i].template cast<float>());
    }
  }
}

template <typename T>
void AdamW<T>::load(std::istream& is, const std::vector<ParamRef<T>>& params) {
  io::expect_magic(is, "MFOP");
  if (io::read_u32(is) != 1) throw std::runtime_error("optimizer state: unsupported version");
  const std::uint64_t t = io::read_u64(is);
  const std::uint32_t count = io::read_u32(is);
  if (count != params.size()) throw std::runtime_error("optimizer state: parameter count differs from model");
  std::vector<std::string> names;
  std::vector<Tensor<T>> m, v;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(io::read_u32(is), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (!is || name != params[i].name) throw std::runtime_error("optimizer state: unexpected parameter " + name);
    m.push_back(io::read_tensor(is).template cast<T>());
    v.push_back(io::read_tensor(is).template cast<T>());
    if (m.back().shape() != params[i].value->shape() || v.back().shape() != params[i].value->shape()) {
      throw std::runtime_error("optimizer state: shape mismatch for " + name);
    }
    names.push_back(std::move(name));
  }
  t_ = t;
  names_ = std::move(names);
  m_ = std::move(m);
  v_ = std::move(v);
}

double LrSchedule::at(std::size_t step) const {
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(total > warmup ? total - warmup : 1);
  const double progress = std::min(1.0, static_cast<double>(step - std::min(step, warmup)) / span);
  return base * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace mf
