#include "icaps/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace icaps {

namespace {
std::atomic<uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;
}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

namespace detail {

std::shared_ptr<Node> make_node(Shape shape, std::vector<float> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return n;
}

Tensor make_op_result(const char* op, Shape shape, std::vector<float> value,
                      std::vector<Tensor> inputs, BackwardFn backward) {
  auto n = make_node(std::move(shape), std::move(value));
  n->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) {
      if (t.defined() && t.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    n->requires_grad = true;
    n->backward = std::move(backward);
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
  }
  return Tensor(std::move(n));
}

}  // namespace detail

Tensor Tensor::zeros(Shape s, bool requires_grad) {
  auto n = detail::make_node(s, std::vector<float>(static_cast<size_t>(shape_numel(s)), 0.0f));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape s, float v, bool requires_grad) {
  auto n = detail::make_node(s, std::vector<float>(static_cast<size_t>(shape_numel(s)), v));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_vector(Shape s, std::vector<float> v, bool requires_grad) {
  if (shape_numel(s) != static_cast<int64_t>(v.size()))
    throw ShapeError("from_vector: shape " + shape_str(s) + " does not match data length " +
                     std::to_string(v.size()));
  auto n = detail::make_node(std::move(s), std::move(v));
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v) { return from_vector({}, {v}); }

Tensor Tensor::uniform(Shape s, Rng& rng, float lo, float hi, bool requires_grad) {
  std::vector<float> v(static_cast<size_t>(shape_numel(s)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return from_vector(std::move(s), std::move(v), requires_grad);
}

Tensor Tensor::normal(Shape s, Rng& rng, bool requires_grad) {
  std::vector<float> v(static_cast<size_t>(shape_numel(s)));
  for (auto& x : v) x = rng.normal();
  return from_vector(std::move(s), std::move(v), requires_grad);
}

float* Tensor::mutable_data() {
  if (n_->backward) throw ValueError("mutable_data: only leaf tensors may be mutated");
  return n_->value.data();
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
  return n_->value[0];
}

float Tensor::at(std::initializer_list<int> idx) const {
  if (idx.size() != n_->shape.size()) throw ShapeError("at: rank mismatch");
  int64_t off = 0;
  size_t i = 0;
  for (int v : idx) {
    off = off * n_->shape[i] + v;
    ++i;
  }
  return n_->value[static_cast<size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool v) {
  if (n_->backward && !v)
    throw ValueError("set_requires_grad: cannot clear on a non-leaf tensor");
  n_->requires_grad = v;
  return *this;
}

Tensor Tensor::grad() const {
  if (!n_->grad) return Tensor();
  return Tensor(n_->grad);
}

void Tensor::zero_grad() { n_->grad.reset(); }

void Tensor::accumulate_grad(const Tensor& g) {
  if (g.shape() != shape())
    throw ShapeError("accumulate_grad: gradient shape " + shape_str(g.shape()) +
                     " vs tensor shape " + shape_str(shape()));
  if (!n_->grad) {
    n_->grad = detail::make_node(shape(), g.values());
  } else {
    float* dst = n_->grad->value.data();
    const float* src = g.data();
    for (int64_t i = 0; i < numel(); ++i) dst[i] += src[i];
  }
}

Tensor Tensor::detach() const {
  auto n = detail::make_node(n_->shape, n_->value);
  return Tensor(std::move(n));
}

namespace {

// Reverse topological sweep shared by backward() and grad_of().
void run_backward(const Tensor& loss, bool create_graph,
                  std::unordered_map<Node*, Tensor>& grads,
                  const std::unordered_set<Node*>* keep_for) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Collect reachable grad-requiring nodes.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{loss.node()};
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    if (!n || !n->requires_grad || seen.count(n.get())) continue;
    seen.insert(n.get());
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p);
  }
  // Creation order is a valid topological order of the recorded tape.
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  grads[loss.node().get()] = Tensor::full(loss.shape(), 1.0f);

  for (auto& n : order) {
    auto it = grads.find(n.get());
    if (it == grads.end()) continue;
    Tensor g = it->second;
    if (n->backward) {
      std::vector<Tensor> gins;
      if (create_graph) {
        gins = n->backward(Tensor(n), g);
      } else {
        NoGradGuard ng;
        gins = n->backward(Tensor(n), g);
      }
      if (gins.size() != n->parents.size())
        throw ValueError(std::string("backward of op '") + n->op +
                         "' returned wrong number of gradients");
      for (size_t i = 0; i < n->parents.size(); ++i) {
        auto& p = n->parents[i];
        if (!p || !p->requires_grad || !gins[i].defined()) continue;
        auto g_it = grads.find(p.get());
        if (g_it == grads.end()) {
          grads[p.get()] = gins[i];
        } else {
          g_it->second = add(g_it->second, gins[i]);
        }
      }
      // Free gradients of interior nodes we no longer need.
      if (!keep_for || !keep_for->count(n.get())) grads.erase(n.get());
    } else {
      // Leaf: keep the entry; callers decide whether to accumulate.
    }
  }
}

}  // namespace

void Tensor::backward() const {
  std::unordered_map<Node*, Tensor> grads;
  run_backward(*this, /*create_graph=*/false, grads, nullptr);
  for (auto& [node, g] : grads) {
    if (node->backward || !node->requires_grad) continue;
    if (!node->grad) {
      node->grad = detail::make_node(node->shape, g.values());
    } else {
      float* dst = node->grad->value.data();
      const float* src = g.data();
      for (size_t i = 0; i < node->value.size(); ++i) dst[i] += src[i];
    }
  }
}

std::vector<Tensor> grad_of(const Tensor& loss, const std::vector<Tensor>& wrt,
                            bool create_graph) {
  std::unordered_map<Node*, Tensor> grads;
  std::unordered_set<Node*> keep;
  for (const auto& t : wrt) keep.insert(t.node().get());
  run_backward(loss, create_graph, grads, &keep);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto it = grads.find(t.node().get());
    if (it == grads.end()) {
      out.push_back(Tensor::zeros(t.shape()));
    } else {
      out.push_back(it->second);
    }
  }
  return out;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           float eps, float tol, int max_coords, Rng& rng) {
  GradCheckReport report;
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  Tensor loss = f(probe);
  if (loss.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  probe.zero_grad();
  loss.backward();
  Tensor analytic = probe.grad();
  if (!analytic.defined()) analytic = Tensor::zeros(probe.shape());

  const int64_t n = probe.numel();
  const int count = static_cast<int>(std::min<int64_t>(n, max_coords));
  std::vector<int64_t> coords;
  if (n <= max_coords) {
    for (int64_t i = 0; i < n; ++i) coords.push_back(i);
  } else {
    std::unordered_set<int64_t> chosen;
    while (static_cast<int>(chosen.size()) < count)
      chosen.insert(static_cast<int64_t>(rng.below(static_cast<uint64_t>(n))));
    coords.assign(chosen.begin(), chosen.end());
  }

  bool nan_seen = false;
  for (int64_t c : coords) {
    Tensor xp = probe.detach();
    Tensor xm = probe.detach();
    xp.mutable_data()[c] += eps;
    xm.mutable_data()[c] -= eps;
    // No grad guard here: f may itself differentiate internally.
    const float fp = f(xp).item();
    const float fm = f(xm).item();
    const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * eps);
    const double a = analytic.data()[c];
    if (std::isnan(numeric) || std::isnan(a)) {
      nan_seen = true;
      continue;
    }
    const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = static_cast<float>(rel);
      report.note = "coord " + std::to_string(c);
    }
  }
  report.coords_checked = static_cast<int>(coords.size());
  report.ok = !nan_seen && report.max_rel_err < tol;
  if (nan_seen) report.note = "NaN gradient";
  return report;
}

}  // namespace icaps
