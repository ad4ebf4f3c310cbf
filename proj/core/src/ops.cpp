#include "mteeg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

namespace mteeg {

namespace {

thread_local bool g_grad_enabled = true;

bool any_requires_grad(const std::vector<TensorPtr>& ts) {
    for (const auto& t : ts) {
        if (t && t->requires_grad) {
            return true;
        }
    }
    return false;
}

// Wires `out` into the graph when grad mode is on and an input needs grads.
void link(const TensorPtr& out, std::vector<TensorPtr> parents,
          std::function<void(Tensor&)> fn) {
    if (!g_grad_enabled || !any_requires_grad(parents)) {
        return;
    }
    out->set_requires_grad(true);
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

void require_same_shape(const TensorPtr& a, const TensorPtr& b, const char* what) {
    if (a->shape != b->shape) {
        throw ShapeError(std::string(what) + ": shape mismatch");
    }
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

bool grad_mode_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- elementwise / structural ----------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "add");
    auto out = Tensor::create(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) {
        out->at(i) = a->at(i) + b->at(i);
    }
    link(out, {a, b}, [a, b](Tensor& o) {
        if (a->requires_grad) {
            a->accumulate_grad(o.grad);
        }
        if (b->requires_grad) {
            b->accumulate_grad(o.grad);
        }
    });
    return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "sub");
    auto out = Tensor::create(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) {
        out->at(i) = a->at(i) - b->at(i);
    }
    link(out, {a, b}, [a, b](Tensor& o) {
        if (a->requires_grad) {
            a->accumulate_grad(o.grad);
        }
        if (b->requires_grad) {
            std::vector<double> g(o.grad.size());
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] = -o.grad[i];
            }
            b->accumulate_grad(g);
        }
    });
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    require_same_shape(a, b, "mul");
    auto out = Tensor::create(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) {
        out->at(i) = a->at(i) * b->at(i);
    }
    link(out, {a, b}, [a, b](Tensor& o) {
        const auto n = o.grad.size();
        if (a->requires_grad) {
            std::vector<double> g(n);
            for (std::size_t i = 0; i < n; ++i) {
                g[i] = b->data[i] * o.grad[i];
            }
            a->accumulate_grad(g);
        }
        if (b->requires_grad) {
            std::vector<double> g(n);
            for (std::size_t i = 0; i < n; ++i) {
                g[i] = a->data[i] * o.grad[i];
            }
            b->accumulate_grad(g);
        }
    });
    return out;
}

TensorPtr scale(const TensorPtr& a, double c) {
    auto out = Tensor::create(a->shape);
    for (std::int64_t i = 0; i < a->size(); ++i) {
        out->at(i) = a->at(i) * c;
    }
    link(out, {a}, [a, c](Tensor& o) {
        std::vector<double> g(o.grad.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] = c * o.grad[i];
        }
        a->accumulate_grad(g);
    });
    return out;
}

TensorPtr reshape(const TensorPtr& a, std::vector<std::int64_t> new_shape) {
    if (shape_product(new_shape) != a->size()) {
        throw ShapeError("reshape: element count mismatch");
    }
    auto out = Tensor::from_data(std::move(new_shape), a->data);
    link(out, {a}, [a](Tensor& o) { a->accumulate_grad(o.grad); });
    return out;
}

TensorPtr sum_all(const TensorPtr& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a->size(); ++i) {
        s += a->at(i);
    }
    auto out = Tensor::scalar(s);
    link(out, {a}, [a](Tensor& o) {
        std::vector<double> g(a->data.size(), o.grad[0]);
        a->accumulate_grad(g);
    });
    return out;
}

TensorPtr add_rowvec(const TensorPtr& x, const TensorPtr& v) {
    if (x->rank() != 2 || v->rank() != 1 || v->dim(0) != x->dim(1)) {
        throw ShapeError("add_rowvec: expected [n x m] and [m]");
    }
    const std::int64_t n = x->dim(0);
    const std::int64_t m = x->dim(1);
    auto out = Tensor::create(x->shape);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < m; ++j) {
            out->at(i, j) = x->at(i, j) + v->at(j);
        }
    }
    link(out, {x, v}, [x, v, n, m](Tensor& o) {
        if (x->requires_grad) {
            x->accumulate_grad(o.grad);
        }
        if (v->requires_grad) {
            std::vector<double> g(static_cast<std::size_t>(m), 0.0);
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < m; ++j) {
                    g[static_cast<std::size_t>(j)] += o.grad[static_cast<std::size_t>(i * m + j)];
                }
            }
            v->accumulate_grad(g);
        }
    });
    return out;
}

TensorPtr add_channel_bias(const TensorPtr& x, const TensorPtr& b) {
    if (b->rank() != 1) {
        throw ShapeError("add_channel_bias: bias must be rank-1");
    }
    std::int64_t batch = 1;
    std::int64_t channels = 0;
    std::int64_t length = 0;
    if (x->rank() == 2) {
        channels = x->dim(0);
        length = x->dim(1);
    } else if (x->rank() == 3) {
        batch = x->dim(0);
        channels = x->dim(1);
        length = x->dim(2);
    } else {
        throw ShapeError("add_channel_bias: expected rank-2 or rank-3 input");
    }
    if (b->dim(0) != channels) {
        throw ShapeError("add_channel_bias: bias length != channel count");
    }
    auto out = Tensor::create(x->shape);
    for (std::int64_t n = 0; n < batch; ++n) {
        for (std::int64_t c = 0; c < channels; ++c) {
            const double bc = b->at(c);
            const std::int64_t base = (n * channels + c) * length;
            for (std::int64_t l = 0; l < length; ++l) {
                out->at(base + l) = x->at(base + l) + bc;
            }
        }
    }
    link(out, {x, b}, [x, b, batch, channels, length](Tensor& o) {
        if (x->requires_grad) {
            x->accumulate_grad(o.grad);
        }
        if (b->requires_grad) {
            std::vector<double> g(static_cast<std::size_t>(channels), 0.0);
            for (std::int64_t n = 0; n < batch; ++n) {
                for (std::int64_t c = 0; c < channels; ++c) {
                    const std::int64_t base = (n * channels + c) * length;
                    double acc = 0.0;
                    for (std::int64_t l = 0; l < length; ++l) {
                        acc += o.grad[static_cast<std::size_t>(base + l)];
                    }
                    g[static_cast<std::size_t>(c)] += acc;
                }
            }
            b->accumulate_grad(g);
        }
    });
    return out;
}

TensorPtr slice_cols(const TensorPtr& x, std::int64_t start, std::int64_t count) {
    if (x->rank() != 2) {
        throw ShapeError("slice_cols: expected rank-2 input");
    }
    const std::int64_t n = x->dim(0);
    const std::int64_t m = x->dim(1);
    if (start < 0 || count <= 0 || start + count > m) {
        throw ShapeError("slice_cols: column range out of bounds");
    }
    auto out = Tensor::create({n, count});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < count; ++j) {
            out->at(i, j) = x->at(i, start + j);
        }
    }
    link(out, {x}, [x, start, count, n, m](Tensor& o) {
        std::vector<double> g(x->data.size(), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < count; ++j) {
                g[static_cast<std::size_t>(i * m + start + j)] =
                    o.grad[static_cast<std::size_t>(i * count + j)];
            }
        }
        x->accumulate_grad(g);
    });
    return out;
}

TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no inputs");
    }
    const std::int64_t n = parts[0]->dim(0);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p->rank() != 2 || p->dim(0) != n) {
            throw ShapeError("concat_cols: row count mismatch");
        }
        total += p->dim(1);
    }
    auto out = Tensor::create({n, total});
    std::int64_t col = 0;
    for (const auto& p : parts) {
        const std::int64_t m = p->dim(1);
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < m; ++j) {
                out->at(i, col + j) = p->at(i, j);
            }
        }
        col += m;
    }
    link(out, parts, [parts, n, total](Tensor& o) {
        std::int64_t col = 0;
        for (const auto& p : parts) {
            const std::int64_t m = p->dim(1);
            if (p->requires_grad) {
                std::vector<double> g(p->data.size());
                for (std::int64_t i = 0; i < n; ++i) {
                    for (std::int64_t j = 0; j < m; ++j) {
                        g[static_cast<std::size_t>(i * m + j)] =
                            o.grad[static_cast<std::size_t>(i * total + col + j)];
                    }
                }
                p->accumulate_grad(g);
            }
            col += m;
        }
    });
    return out;
}

TensorPtr gather_rows(const TensorPtr& table, const std::vector<std::int64_t>& indices) {
    if (table->rank() != 2) {
        throw ShapeError("gather_rows: table must be rank-2");
    }
    const std::int64_t rows = table->dim(0);
    const std::int64_t d = table->dim(1);
    const auto n = static_cast<std::int64_t>(indices.size());
    for (std::int64_t idx : indices) {
        if (idx < 0 || idx >= rows) {
            throw ShapeError("gather_rows: index out of table bounds");
        }
    }
    auto out = Tensor::create({n, d});
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t r = indices[static_cast<std::size_t>(i)];
        std::copy_n(table->data.begin() + static_cast<std::ptrdiff_t>(r * d), d,
                    out->data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    link(out, {table}, [table, indices, d](Tensor& o) {
        std::vector<double> g(table->data.size(), 0.0);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const std::int64_t r = indices[i];
            for (std::int64_t j = 0; j < d; ++j) {
                g[static_cast<std::size_t>(r * d + j)] +=
                    o.grad[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
            }
        }
        table->accumulate_grad(g);
    });
    return out;
}

TensorPtr mix(const std::vector<TensorPtr>& xs, const TensorPtr& weights) {
    if (xs.empty()) {
        throw ShapeError("mix: no inputs");
    }
    if (weights->rank() != 1 || weights->dim(0) != static_cast<std::int64_t>(xs.size())) {
        throw ShapeError("mix: weight count mismatch");
    }
    for (const auto& x : xs) {
        require_same_shape(xs[0], x, "mix");
    }
    auto out = Tensor::create(xs[0]->shape);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double w = weights->at(static_cast<std::int64_t>(i));
        for (std::int64_t j = 0; j < out->size(); ++j) {
            out->at(j) += w * xs[i]->at(j);
        }
    }
    std::vector<TensorPtr> parents = xs;
    parents.push_back(weights);
    link(out, parents, [xs, weights](Tensor& o) {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double w = weights->at(static_cast<std::int64_t>(i));
            if (xs[i]->requires_grad) {
                std::vector<double> g(o.grad.size());
                for (std::size_t j = 0; j < g.size(); ++j) {
                    g[j] = w * o.grad[j];
                }
                xs[i]->accumulate_grad(g);
            }
        }
        if (weights->requires_grad) {
            std::vector<double> g(xs.size(), 0.0);
            for (std::size_t i = 0; i < xs.size(); ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < o.grad.size(); ++j) {
                    acc += xs[i]->data[j] * o.grad[j];
                }
                g[i] = acc;
            }
            weights->accumulate_grad(g);
        }
    });
    return out;
}

TensorPtr mean_rows(const TensorPtr& x) {
    if (x->rank() != 2) {
        throw ShapeError("mean_rows: expected rank-2 input");
    }
    const std::int64_t n = x->dim(0);
    const std::int64_t d = x->dim(1);
    auto out = Tensor::create({1, d});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < d; ++j) {
            out->at(0, j) += x->at(i, j);
        }
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (std::int64_t j = 0; j < d; ++j) {
        out->at(0, j) *= inv;
    }
    link(out, {x}, [x, n, d, inv](Tensor& o) {
        std::vector<double> g(x->data.size());
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < d; ++j) {
                g[static_cast<std::size_t>(i * d + j)] = inv * o.grad[static_cast<std::size_t>(j)];
            }
        }
        x->accumulate_grad(g);
    });
    return out;
}

// ---- core math --------------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2) {
        throw ShapeError("matmul: expected rank-2 inputs");
    }
    const std::int64_t m = a->dim(0);
    const std::int64_t k = a->dim(1);
    if (b->dim(0) != k) {
        throw ShapeError("matmul: inner dimensions disagree");
    }
    const std::int64_t n = b->dim(1);
    auto out = Tensor::create({m, n});
    const double* ad = a->data.data();
    const double* bd = b->data.data();
    double* od = out->data.data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = bd + p * n;
            double* orow = od + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    link(out, {a, b}, [a, b, m, k, n](Tensor& o) {
        const double* gd = o.grad.data();
        if (a->requires_grad) {
            // dA = G . B^T
            std::vector<double> ga(a->data.size(), 0.0);
            const double* bd = b->data.data();
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t p = 0; p < k; ++p) {
                    const double* grow = gd + i * n;
                    const double* brow = bd + p * n;
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        acc += grow[j] * brow[j];
                    }
                    ga[static_cast<std::size_t>(i * k + p)] = acc;
                }
            }
            a->accumulate_grad(ga);
        }
        if (b->requires_grad) {
            // dB = A^T . G
            std::vector<double> gb(b->data.size(), 0.0);
            const double* ad = a->data.data();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* grow = gd + i * n;
                for (std::int64_t p = 0; p < k; ++p) {
                    const double av = ad[i * k + p];
                    if (av == 0.0) {
                        continue;
                    }
                    double* brow = gb.data() + p * n;
                    for (std::int64_t j = 0; j < n; ++j) {
                        brow[j] += av * grow[j];
                    }
                }
            }
            b->accumulate_grad(gb);
        }
    });
    return out;
}

TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2) {
        throw ShapeError("matmul_nt: expected rank-2 inputs");
    }
    const std::int64_t m = a->dim(0);
    const std::int64_t k = a->dim(1);
    if (b->dim(1) != k) {
        throw ShapeError("matmul_nt: inner dimensions disagree");
    }
    const std::int64_t n = b->dim(0);
    auto out = Tensor::create({m, n});
    const double* ad = a->data.data();
    const double* bd = b->data.data();
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = ad + i * k;
        double* orow = out->data.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* brow = bd + j * k;
            double acc = 0.0;
            for (std::int64_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            orow[j] = acc;
        }
    }
    link(out, {a, b}, [a, b, m, k, n](Tensor& o) {
        const double* gd = o.grad.data();
        if (a->requires_grad) {
            // dA = G . B
            std::vector<double> ga(a->data.size(), 0.0);
            const double* bd = b->data.data();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* grow = gd + i * n;
                double* garow = ga.data() + i * k;
                for (std::int64_t j = 0; j < n; ++j) {
                    const double gv = grow[j];
                    if (gv == 0.0) {
                        continue;
                    }
                    const double* brow = bd + j * k;
                    for (std::int64_t p = 0; p < k; ++p) {
                        garow[p] += gv * brow[p];
                    }
                }
            }
            a->accumulate_grad(ga);
        }
        if (b->requires_grad) {
            // dB = G^T . A
            std::vector<double> gb(b->data.size(), 0.0);
            const double* ad = a->data.data();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* grow = gd + i * n;
                const double* arow = ad + i * k;
                for (std::int64_t j = 0; j < n; ++j) {
                    const double gv = grow[j];
                    if (gv == 0.0) {
                        continue;
                    }
                    double* gbrow = gb.data() + j * k;
                    for (std::int64_t p = 0; p < k; ++p) {
                        gbrow[p] += gv * arow[p];
                    }
                }
            }
            b->accumulate_grad(gb);
        }
    });
    return out;
}

TensorPtr gelu(const TensorPtr& x) {
    auto out = Tensor::create(x->shape);
    for (std::int64_t i = 0; i < x->size(); ++i) {
        const double v = x->at(i);
        out->at(i) = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    }
    link(out, {x}, [x](Tensor& o) {
        std::vector<double> g(x->data.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = x->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            g[i] = (cdf + v * pdf) * o.grad[i];
        }
        x->accumulate_grad(g);
    });
    return out;
}

namespace {

// Shared softmax kernel over strided slices: `slices` runs, each of `len`
// elements spaced `stride` apart starting at slice*slice_stride.
void softmax_slices(const double* in, double* out, std::int64_t slices, std::int64_t len,
                    std::int64_t stride, std::int64_t slice_stride) {
    for (std::int64_t s = 0; s < slices; ++s) {
        const double* src = in + s * slice_stride;
        double* dst = out + s * slice_stride;
        double mx = src[0];
        for (std::int64_t i = 1; i < len; ++i) {
            mx = std::max(mx, src[i * stride]);
        }
        double sum = 0.0;
        for (std::int64_t i = 0; i < len; ++i) {
            const double e = std::exp(src[i * stride] - mx);
            dst[i * stride] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t i = 0; i < len; ++i) {
            dst[i * stride] *= inv;
        }
    }
}

void softmax_backward_slices(const double* y, const double* gy, double* gx, std::int64_t slices,
                             std::int64_t len, std::int64_t stride, std::int64_t slice_stride) {
    for (std::int64_t s = 0; s < slices; ++s) {
        const double* ys = y + s * slice_stride;
        const double* gs = gy + s * slice_stride;
        double* xs = gx + s * slice_stride;
        double dot = 0.0;
        for (std::int64_t i = 0; i < len; ++i) {
            dot += ys[i * stride] * gs[i * stride];
        }
        for (std::int64_t i = 0; i < len; ++i) {
            xs[i * stride] = (gs[i * stride] - dot) * ys[i * stride];
        }
    }
}

struct SoftmaxLayout {
    std::int64_t slices;
    std::int64_t len;
    std::int64_t stride;
    std::int64_t slice_stride;
};

SoftmaxLayout softmax_layout(const Tensor& x, std::int64_t axis) {
    if (x.rank() == 1) {
        if (axis != 0) {
            throw ShapeError("softmax: axis out of range for rank-1 tensor");
        }
        return {1, x.shape[0], 1, 0};
    }
    if (x.rank() == 2) {
        const std::int64_t rows = x.shape[0];
        const std::int64_t cols = x.shape[1];
        if (axis == 1) {
            return {rows, cols, 1, cols};
        }
        if (axis == 0) {
            return {cols, rows, cols, 1};
        }
        throw ShapeError("softmax: axis out of range for rank-2 tensor");
    }
    throw ShapeError("softmax: rank-1 or rank-2 input expected");
}

}  // namespace

TensorPtr softmax(const TensorPtr& x, std::int64_t axis) {
    const auto layout = softmax_layout(*x, axis);
    auto out = Tensor::create(x->shape);
    softmax_slices(x->data.data(), out->data.data(), layout.slices, layout.len, layout.stride,
                   layout.slice_stride);
    link(out, {x}, [x, layout](Tensor& o) {
        std::vector<double> g(x->data.size(), 0.0);
        softmax_backward_slices(o.data.data(), o.grad.data(), g.data(), layout.slices, layout.len,
                                layout.stride, layout.slice_stride);
        x->accumulate_grad(g);
    });
    return out;
}

namespace {

// Element grouping for normalize(): each group is normalized independently;
// gamma/beta are indexed by the affine index of each element.
struct NormLayout {
    std::int64_t num_groups;
    std::int64_t group_size;
    // flat element index for (group, member)
    std::function<std::int64_t(std::int64_t, std::int64_t)> element;
    // affine (gamma/beta) index for (group, member)
    std::function<std::int64_t(std::int64_t, std::int64_t)> affine;
    std::int64_t affine_size;
};

NormLayout norm_layout(const Tensor& x, NormMode mode, std::int64_t groups) {
    if (mode == NormMode::kLayer) {
        if (x.rank() == 1) {
            const std::int64_t f = x.shape[0];
            return {1, f, [](std::int64_t, std::int64_t m) { return m; },
                    [](std::int64_t, std::int64_t m) { return m; }, f};
        }
        if (x.rank() == 2) {
            const std::int64_t n = x.shape[0];
            const std::int64_t f = x.shape[1];
            return {n, f, [f](std::int64_t g, std::int64_t m) { return g * f + m; },
                    [](std::int64_t, std::int64_t m) { return m; }, f};
        }
        throw ShapeError("normalize(layer): rank-1 or rank-2 input expected");
    }
    // group mode
    std::int64_t batch = 1;
    std::int64_t channels = 0;
    std::int64_t length = 0;
    if (x.rank() == 2) {
        channels = x.shape[0];
        length = x.shape[1];
    } else if (x.rank() == 3) {
        batch = x.shape[0];
        channels = x.shape[1];
        length = x.shape[2];
    } else {
        throw ShapeError("normalize(group): rank-2 or rank-3 input expected");
    }
    if (groups < 1 || channels % groups != 0) {
        throw ShapeError("normalize(group): channel count not divisible by group count");
    }
    const std::int64_t ch_per_group = channels / groups;
    const std::int64_t group_size = ch_per_group * length;
    const std::int64_t num_groups = batch * groups;
    auto element = [=](std::int64_t g, std::int64_t m) {
        const std::int64_t b = g / groups;
        const std::int64_t gr = g % groups;
        const std::int64_t c = gr * ch_per_group + m / length;
        const std::int64_t l = m % length;
        return (b * channels + c) * length + l;
    };
    auto affine = [=](std::int64_t g, std::int64_t m) {
        const std::int64_t gr = g % groups;
        return gr * ch_per_group + m / length;
    };
    return {num_groups, group_size, element, affine, channels};
}

}  // namespace

TensorPtr normalize(const TensorPtr& x, NormMode mode, std::int64_t groups, double eps,
                    const TensorPtr& gamma, const TensorPtr& beta) {
    if (eps <= 0.0) {
        throw ConfigError("normalize: eps must be positive");
    }
    auto layout = norm_layout(*x, mode, groups);
    if (gamma->size() != layout.affine_size || beta->size() != layout.affine_size) {
        throw ShapeError("normalize: affine parameter size mismatch");
    }

    auto out = Tensor::create(x->shape);
    // Cache per-group stats and normalized values for backward.
    auto xhat = std::make_shared<std::vector<double>>(x->data.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(layout.num_groups));

    const double inv_n = 1.0 / static_cast<double>(layout.group_size);
    for (std::int64_t g = 0; g < layout.num_groups; ++g) {
        double mean = 0.0;
        for (std::int64_t m = 0; m < layout.group_size; ++m) {
            mean += x->at(layout.element(g, m));
        }
        mean *= inv_n;
        double var = 0.0;
        for (std::int64_t m = 0; m < layout.group_size; ++m) {
            const double d = x->at(layout.element(g, m)) - mean;
            var += d * d;
        }
        var *= inv_n;
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(g)] = inv;
        for (std::int64_t m = 0; m < layout.group_size; ++m) {
            const std::int64_t e = layout.element(g, m);
            const double xn = (x->at(e) - mean) * inv;
            (*xhat)[static_cast<std::size_t>(e)] = xn;
            out->at(e) = xn * gamma->at(layout.affine(g, m)) + beta->at(layout.affine(g, m));
        }
    }

    link(out, {x, gamma, beta}, [x, gamma, beta, layout, xhat, inv_std, inv_n](Tensor& o) {
        std::vector<double> gx(x->requires_grad ? x->data.size() : 0, 0.0);
        std::vector<double> ggamma(gamma->requires_grad ? gamma->data.size() : 0, 0.0);
        std::vector<double> gbeta(beta->requires_grad ? beta->data.size() : 0, 0.0);
        for (std::int64_t g = 0; g < layout.num_groups; ++g) {
            const double inv = (*inv_std)[static_cast<std::size_t>(g)];
            double mean_gh = 0.0;
            double mean_gh_xhat = 0.0;
            for (std::int64_t m = 0; m < layout.group_size; ++m) {
                const std::int64_t e = layout.element(g, m);
                const double gh =
                    o.grad[static_cast<std::size_t>(e)] * gamma->at(layout.affine(g, m));
                mean_gh += gh;
                mean_gh_xhat += gh * (*xhat)[static_cast<std::size_t>(e)];
            }
            mean_gh *= inv_n;
            mean_gh_xhat *= inv_n;
            for (std::int64_t m = 0; m < layout.group_size; ++m) {
                const std::int64_t e = layout.element(g, m);
                const std::int64_t a = layout.affine(g, m);
                const double go = o.grad[static_cast<std::size_t>(e)];
                const double xn = (*xhat)[static_cast<std::size_t>(e)];
                if (x->requires_grad) {
                    const double gh = go * gamma->at(a);
                    gx[static_cast<std::size_t>(e)] = inv * (gh - mean_gh - xn * mean_gh_xhat);
                }
                if (gamma->requires_grad) {
                    ggamma[static_cast<std::size_t>(a)] += go * xn;
                }
                if (beta->requires_grad) {
                    gbeta[static_cast<std::size_t>(a)] += go;
                }
            }
        }
        if (x->requires_grad) {
            x->accumulate_grad(gx);
        }
        if (gamma->requires_grad) {
            gamma->accumulate_grad(ggamma);
        }
        if (beta->requires_grad) {
            beta->accumulate_grad(gbeta);
        }
    });
    return out;
}

TensorPtr conv1d_batch(const TensorPtr& x, const TensorPtr& kernel, std::int64_t stride,
                       std::int64_t padding) {
    if (x->rank() != 3 || kernel->rank() != 3) {
        throw ShapeError("conv1d: expected x [B x Cin x L] and kernel [Cout x Cin x k]");
    }
    if (stride < 1 || padding < 0) {
        throw ShapeError("conv1d: stride must be >= 1 and padding >= 0");
    }
    const std::int64_t batch = x->dim(0);
    const std::int64_t cin = x->dim(1);
    const std::int64_t len = x->dim(2);
    const std::int64_t cout = kernel->dim(0);
    if (kernel->dim(1) != cin) {
        throw ShapeError("conv1d: input channel count mismatch");
    }
    const std::int64_t k = kernel->dim(2);
    if (k > len + 2 * padding) {
        throw ShapeError("conv1d: kernel longer than padded input");
    }
    const std::int64_t out_len = (len + 2 * padding - k) / stride + 1;
    if (out_len < 1) {
        throw ShapeError("conv1d: empty output window");
    }

    auto out = Tensor::create({batch, cout, out_len});
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t co = 0; co < cout; ++co) {
            for (std::int64_t t = 0; t < out_len; ++t) {
                const std::int64_t origin = t * stride - padding;
                double acc = 0.0;
                for (std::int64_t ci = 0; ci < cin; ++ci) {
                    const double* xrow = x->data.data() + (b * cin + ci) * len;
                    const double* krow = kernel->data.data() + (co * cin + ci) * k;
                    const std::int64_t u0 = std::max<std::int64_t>(0, -origin);
                    const std::int64_t u1 = std::min<std::int64_t>(k, len - origin);
                    for (std::int64_t u = u0; u < u1; ++u) {
                        acc += krow[u] * xrow[origin + u];
                    }
                }
                out->at((b * cout + co) * out_len + t) = acc;
            }
        }
    }

    link(out, {x, kernel}, [x, kernel, stride, padding, batch, cin, len, cout, k,
                            out_len](Tensor& o) {
        if (x->requires_grad) {
            std::vector<double> gx(x->data.size(), 0.0);
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t co = 0; co < cout; ++co) {
                    const double* grow = o.grad.data() + (b * cout + co) * out_len;
                    for (std::int64_t t = 0; t < out_len; ++t) {
                        const double gv = grow[t];
                        if (gv == 0.0) {
                            continue;
                        }
                        const std::int64_t origin = t * stride - padding;
                        for (std::int64_t ci = 0; ci < cin; ++ci) {
                            double* xrow = gx.data() + (b * cin + ci) * len;
                            const double* krow = kernel->data.data() + (co * cin + ci) * k;
                            const std::int64_t u0 = std::max<std::int64_t>(0, -origin);
                            const std::int64_t u1 = std::min<std::int64_t>(k, len - origin);
                            for (std::int64_t u = u0; u < u1; ++u) {
                                xrow[origin + u] += krow[u] * gv;
                            }
                        }
                    }
                }
            }
            x->accumulate_grad(gx);
        }
        if (kernel->requires_grad) {
            std::vector<double> gk(kernel->data.size(), 0.0);
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t co = 0; co < cout; ++co) {
                    const double* grow = o.grad.data() + (b * cout + co) * out_len;
                    for (std::int64_t t = 0; t < out_len; ++t) {
                        const double gv = grow[t];
                        if (gv == 0.0) {
                            continue;
                        }
                        const std::int64_t origin = t * stride - padding;
                        for (std::int64_t ci = 0; ci < cin; ++ci) {
                            const double* xrow = x->data.data() + (b * cin + ci) * len;
                            double* krow = gk.data() + (co * cin + ci) * k;
                            const std::int64_t u0 = std::max<std::int64_t>(0, -origin);
                            const std::int64_t u1 = std::min<std::int64_t>(k, len - origin);
                            for (std::int64_t u = u0; u < u1; ++u) {
                                krow[u] += xrow[origin + u] * gv;
                            }
                        }
                    }
                }
            }
            kernel->accumulate_grad(gk);
        }
    });
    return out;
}

TensorPtr conv1d(const TensorPtr& x, const TensorPtr& kernel, std::int64_t stride,
                 std::int64_t padding) {
    if (x->rank() != 2) {
        throw ShapeError("conv1d: expected x [Cin x L]");
    }
    auto batched = reshape(x, {1, x->dim(0), x->dim(1)});
    auto y = conv1d_batch(batched, kernel, stride, padding);
    return reshape(y, {y->dim(1), y->dim(2)});
}

TensorPtr cross_entropy_mean(const TensorPtr& logits, const std::vector<std::int64_t>& labels) {
    if (logits->rank() != 2) {
        throw ShapeError("cross_entropy: logits must be [n x K]");
    }
    const std::int64_t n = logits->dim(0);
    const std::int64_t num_classes = logits->dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n) {
        throw ShapeError("cross_entropy: label count mismatch");
    }
    for (std::int64_t y : labels) {
        if (y < 0 || y >= num_classes) {
            throw DataError("cross_entropy: label out of class range");
        }
    }

    auto probs = std::make_shared<std::vector<double>>(logits->data.size());
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double* row = logits->data.data() + i * num_classes;
        double mx = row[0];
        for (std::int64_t j = 1; j < num_classes; ++j) {
            mx = std::max(mx, row[j]);
        }
        double sum = 0.0;
        for (std::int64_t j = 0; j < num_classes; ++j) {
            const double e = std::exp(row[j] - mx);
            (*probs)[static_cast<std::size_t>(i * num_classes + j)] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < num_classes; ++j) {
            (*probs)[static_cast<std::size_t>(i * num_classes + j)] *= inv;
        }
        total += std::log(sum) + mx - row[labels[static_cast<std::size_t>(i)]];
    }
    auto out = Tensor::scalar(total / static_cast<double>(n));
    link(out, {logits}, [logits, labels, probs, n, num_classes](Tensor& o) {
        const double g = o.grad[0] / static_cast<double>(n);
        std::vector<double> gl(logits->data.size());
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < num_classes; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i * num_classes + j);
                const double indicator = (j == labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
                gl[idx] = ((*probs)[idx] - indicator) * g;
            }
        }
        logits->accumulate_grad(gl);
    });
    return out;
}

double grad_check(const std::function<TensorPtr()>& f, const std::vector<Parameter*>& params,
                  double h) {
    if (h < 1e-6 || h > 1e-3) {
        throw ConfigError("grad_check: h must lie in [1e-6, 1e-3]");
    }
    for (Parameter* p : params) {
        p->value->zero_grad();
    }
    auto loss = f();
    if (!std::isfinite(loss->item())) {
        throw NumericError("grad_check: non-finite loss");
    }
    loss->backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) {
        if (!p->value->requires_grad) {
            throw StateError("grad_check: parameter '" + p->name + "' does not require gradients");
        }
        analytic.push_back(p->value->grad);
    }

    double max_rel = 0.0;
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& values = params[pi]->value->data;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + h;
            const double fp = f()->item();
            values[i] = saved - h;
            const double fm = f()->item();
            values[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericError("grad_check: non-finite perturbed loss");
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double rel =
                std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace mteeg
