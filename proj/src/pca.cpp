#include "pmae/pca.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pmae/binary_io.hpp"

namespace pmae {

namespace {

// Householder reduction of symmetric v (n x n, row-major) to tridiagonal
// form; v is overwritten with the accumulated orthogonal transform, d gets
// the diagonal and e the subdiagonal (EISPACK tred2 lineage).
void tred2(std::vector<double>& v, size_t n, std::vector<double>& d, std::vector<double>& e) {
    auto at = [&](size_t i, size_t j) -> double& { return v[i * n + j]; };
    for (size_t j = 0; j < n; ++j) d[j] = at(n - 1, j);

    for (size_t i = n - 1; i > 0; --i) {
        double scale = 0.0;
        double h = 0.0;
        for (size_t k = 0; k < i; ++k) scale += std::abs(d[k]);
        if (scale == 0.0) {
            e[i] = d[i - 1];
            for (size_t j = 0; j < i; ++j) {
                d[j] = at(i - 1, j);
                at(i, j) = 0.0;
                at(j, i) = 0.0;
            }
        } else {
            for (size_t k = 0; k < i; ++k) {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            double f = d[i - 1];
            double g = std::sqrt(h);
            if (f > 0.0) g = -g;
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for (size_t j = 0; j < i; ++j) e[j] = 0.0;

            for (size_t j = 0; j < i; ++j) {
                f = d[j];
                at(j, i) = f;
                g = e[j] + at(j, j) * f;
                for (size_t k = j + 1; k < i; ++k) {
                    g += at(k, j) * d[k];
                    e[k] += at(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for (size_t j = 0; j < i; ++j) {
                e[j] /= h;
                f += e[j] * d[j];
            }
            const double hh = f / (h + h);
            for (size_t j = 0; j < i; ++j) e[j] -= hh * d[j];
            for (size_t j = 0; j < i; ++j) {
                f = d[j];
                g = e[j];
                for (size_t k = j; k < i; ++k) at(k, j) -= f * e[k] + g * d[k];
                d[j] = at(i - 1, j);
                at(i, j) = 0.0;
            }
        }
        d[i] = h;
    }

    for (size_t i = 0; i + 1 < n; ++i) {
        at(n - 1, i) = at(i, i);
        at(i, i) = 1.0;
        const double h = d[i + 1];
        if (h != 0.0) {
            for (size_t k = 0; k <= i; ++k) d[k] = at(k, i + 1) / h;
            for (size_t j = 0; j <= i; ++j) {
                double g = 0.0;
                for (size_t k = 0; k <= i; ++k) g += at(k, i + 1) * at(k, j);
                for (size_t k = 0; k <= i; ++k) at(k, j) -= g * d[k];
            }
        }
        for (size_t k = 0; k <= i; ++k) at(k, i + 1) = 0.0;
    }
    for (size_t j = 0; j < n; ++j) {
        d[j] = at(n - 1, j);
        at(n - 1, j) = 0.0;
    }
    at(n - 1, n - 1) = 1.0;
    e[0] = 0.0;
}

// Implicit-shift QL on the tridiagonal (d, e); v accumulates eigenvectors as
// columns (EISPACK tql2 lineage). Throws after 30 shifts for one eigenvalue.
void tql2(std::vector<double>& v, size_t n, std::vector<double>& d, std::vector<double>& e) {
    auto at = [&](size_t i, size_t j) -> double& { return v[i * n + j]; };
    for (size_t i = 1; i < n; ++i) e[i - 1] = e[i];
    e[n - 1] = 0.0;

    double f = 0.0;
    double tst1 = 0.0;
    const double eps = std::ldexp(1.0, -52);
    for (size_t l = 0; l < n; ++l) {
        tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
        size_t m = l;
        while (m < n && std::abs(e[m]) > eps * tst1) ++m;
        if (m > l) {
            int iter = 0;
            do {
                if (++iter > 30) {
                    throw ConvergenceError(
                        "eigensolver: QL failed to converge in 30 iterations; residual " +
                        std::to_string(std::abs(e[l])));
                }
                double g = d[l];
                double p = (d[l + 1] - g) / (2.0 * e[l]);
                double r = std::hypot(p, 1.0);
                if (p < 0.0) r = -r;
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                const double dl1 = d[l + 1];
                double h = g - d[l];
                for (size_t i = l + 2; i < n; ++i) d[i] -= h;
                f += h;

                p = d[m];
                double c = 1.0, c2 = c, c3 = c;
                const double el1 = e[l + 1];
                double s = 0.0, s2 = 0.0;
                for (size_t i = m; i-- > l;) {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = std::hypot(p, e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for (size_t k = 0; k < n; ++k) {
                        h = at(k, i + 1);
                        at(k, i + 1) = s * at(k, i) + c * h;
                        at(k, i) = c * at(k, i) - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
            } while (std::abs(e[l]) > eps * tst1);
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

void apply_sign_convention(std::vector<double>& vectors, size_t n) {
    for (size_t col = 0; col < n; ++col) {
        double best = 0.0;
        size_t best_row = 0;
        for (size_t row = 0; row < n; ++row) {
            const double a = std::abs(vectors[row * n + col]);
            if (a > best) {
                best = a;
                best_row = row;
            }
        }
        if (vectors[best_row * n + col] < 0.0) {
            for (size_t row = 0; row < n; ++row) vectors[row * n + col] = -vectors[row * n + col];
        }
    }
}

double kahan_sum(const std::vector<double>& v) {
    double s = 0.0, c = 0.0;
    for (double x : v) {
        const double y = x - c;
        const double t = s + y;
        c = (t - s) - y;
        s = t;
    }
    return s;
}

} // namespace

EigResult symmetric_eig(const std::vector<double>& s, size_t n) {
    if (n < 1) throw ShapeError("symmetric_eig: dimension must be >= 1");
    if (s.size() != n * n) {
        throw ShapeError("symmetric_eig: matrix size " + std::to_string(s.size()) +
                         " does not match dimension " + std::to_string(n));
    }
    double max_abs = 0.0;
    for (double x : s) {
        if (!std::isfinite(x)) throw NonFiniteError("symmetric_eig: non-finite input");
        max_abs = std::max(max_abs, std::abs(x));
    }
    const double sym_tol = 1e-10 * std::max(1.0, max_abs);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = i + 1; j < n; ++j) {
            if (std::abs(s[i * n + j] - s[j * n + i]) > sym_tol) {
                throw ShapeError("symmetric_eig: input is not symmetric at (" +
                                 std::to_string(i) + "," + std::to_string(j) + ")");
            }
        }
    }

    EigResult res;
    res.vectors = s;
    res.values.assign(n, 0.0);
    std::vector<double> e(n, 0.0);
    if (n == 1) {
        res.values[0] = s[0];
        res.vectors[0] = 1.0;
        return res;
    }
    tred2(res.vectors, n, res.values, e);
    tql2(res.vectors, n, res.values, e);

    // Descending eigenvalues; stable under ties so output is reproducible.
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return res.values[a] > res.values[b]; });
    std::vector<double> sorted_vals(n);
    std::vector<double> sorted_vecs(n * n);
    for (size_t col = 0; col < n; ++col) {
        sorted_vals[col] = res.values[order[col]];
        for (size_t row = 0; row < n; ++row) {
            sorted_vecs[row * n + col] = res.vectors[row * n + order[col]];
        }
    }
    res.values = std::move(sorted_vals);
    res.vectors = std::move(sorted_vecs);
    apply_sign_convention(res.vectors, n);
    return res;
}

void PcaBasis::finalize() {
    mean_t_ = Tensor::from_data({dim}, mean);
    v_t_ = Tensor::from_data({dim, dim}, components);
    std::vector<double> vt(dim * dim);
    for (size_t i = 0; i < dim; ++i) {
        for (size_t j = 0; j < dim; ++j) vt[j * dim + i] = components[i * dim + j];
    }
    vt_t_ = Tensor::from_data({dim, dim}, std::move(vt));
}

namespace {

// Fills columns [rank, d) of `vectors` with an orthonormal completion of the
// first `rank` columns, via Householder QR of those columns. Deterministic.
void complete_basis(std::vector<double>& vectors, size_t d, size_t rank) {
    if (rank >= d) return;
    // Copy the known columns into a working [d x rank] matrix.
    std::vector<double> a(d * rank);
    for (size_t i = 0; i < d; ++i) {
        for (size_t j = 0; j < rank; ++j) a[i * rank + j] = vectors[i * d + j];
    }
    // Householder vectors, one per known column.
    std::vector<std::vector<double>> hh(rank);
    for (size_t k = 0; k < rank; ++k) {
        std::vector<double>& v = hh[k];
        v.assign(d - k, 0.0);
        double norm2 = 0.0;
        for (size_t i = k; i < d; ++i) {
            v[i - k] = a[i * rank + k];
            norm2 += v[i - k] * v[i - k];
        }
        const double norm = std::sqrt(norm2);
        const double alpha = v[0] >= 0.0 ? -norm : norm;
        v[0] -= alpha;
        double vnorm2 = 0.0;
        for (double x : v) vnorm2 += x * x;
        if (vnorm2 <= 0.0) {
            v.clear();
            continue;
        }
        const double inv = 1.0 / std::sqrt(vnorm2);
        for (double& x : v) x *= inv;
        for (size_t j = k; j < rank; ++j) {
            double dot = 0.0;
            for (size_t i = k; i < d; ++i) dot += v[i - k] * a[i * rank + j];
            dot *= 2.0;
            for (size_t i = k; i < d; ++i) a[i * rank + j] -= dot * v[i - k];
        }
    }
    // Q = H_0 ... H_{rank-1}; columns rank..d-1 of Q complete the basis.
    std::vector<double> w(d);
    for (size_t col = rank; col < d; ++col) {
        std::fill(w.begin(), w.end(), 0.0);
        w[col] = 1.0;
        for (size_t k = rank; k-- > 0;) {
            const std::vector<double>& v = hh[k];
            if (v.empty()) continue;
            double dot = 0.0;
            for (size_t i = k; i < d; ++i) dot += v[i - k] * w[i];
            dot *= 2.0;
            for (size_t i = k; i < d; ++i) w[i] -= dot * v[i - k];
        }
        for (size_t i = 0; i < d; ++i) vectors[i * d + col] = w[i];
    }
}

} // namespace

PcaBasis fit_pca(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("fit_pca: expected [N,D] data, got " + shape_str(x.shape()));
    }
    const size_t n = x.extent(0);
    const size_t d = x.extent(1);
    const auto& xd = x.data();
    for (double v : xd) {
        if (!std::isfinite(v)) throw NonFiniteError("fit_pca: non-finite input");
    }

    PcaBasis basis;
    basis.dim = d;
    basis.mean.assign(d, 0.0);
    for (size_t i = 0; i < n; ++i) {
        const double* row = xd.data() + i * d;
        for (size_t j = 0; j < d; ++j) basis.mean[j] += row[j];
    }
    for (double& m : basis.mean) m /= static_cast<double>(n);

    std::vector<double> xc(n * d);
    for (size_t i = 0; i < n; ++i) {
        const double* row = xd.data() + i * d;
        double* out = xc.data() + i * d;
        for (size_t j = 0; j < d; ++j) out[j] = row[j] - basis.mean[j];
    }

    if (d > 512 && n < d) {
        // Gram trick: eigendecompose Xc Xc^T (N x N), then map u -> Xc^T u / sqrt(mu).
        std::vector<double> gram(n * n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = i; j < n; ++j) {
                double s = 0.0;
                const double* ri = xc.data() + i * d;
                const double* rj = xc.data() + j * d;
                for (size_t k = 0; k < d; ++k) s += ri[k] * rj[k];
                gram[i * n + j] = s;
                gram[j * n + i] = s;
            }
        }
        EigResult eig = symmetric_eig(gram, n);
        const double mu_max = eig.values.empty() ? 0.0 : std::max(eig.values[0], 0.0);
        const double tol = mu_max * 1e-12;
        size_t rank = 0;
        while (rank < n && eig.values[rank] > tol && eig.values[rank] > 0.0) ++rank;

        basis.eigenvalues.assign(d, 0.0);
        basis.components.assign(d * d, 0.0);
        for (size_t c = 0; c < rank; ++c) {
            basis.eigenvalues[c] = eig.values[c];
            const double inv = 1.0 / std::sqrt(eig.values[c]);
            for (size_t i = 0; i < n; ++i) {
                const double u = eig.vectors[i * n + c];
                if (u == 0.0) continue;
                const double* ri = xc.data() + i * d;
                for (size_t k = 0; k < d; ++k) basis.components[k * d + c] += u * ri[k];
            }
            for (size_t k = 0; k < d; ++k) basis.components[k * d + c] *= inv;
        }
        complete_basis(basis.components, d, rank);
        apply_sign_convention(basis.components, d);
    } else {
        std::vector<double> scatter(d * d, 0.0);
        for (size_t i = 0; i < n; ++i) {
            const double* row = xc.data() + i * d;
            for (size_t a = 0; a < d; ++a) {
                const double va = row[a];
                if (va == 0.0) continue;
                double* out = scatter.data() + a * d;
                for (size_t b = a; b < d; ++b) out[b] += va * row[b];
            }
        }
        for (size_t a = 0; a < d; ++a) {
            for (size_t b = a + 1; b < d; ++b) scatter[b * d + a] = scatter[a * d + b];
        }
        EigResult eig = symmetric_eig(scatter, d);
        basis.eigenvalues = std::move(eig.values);
        basis.components = std::move(eig.vectors);
    }

    for (double& v : basis.eigenvalues) v = std::max(v, 0.0);
    const double total = kahan_sum(basis.eigenvalues);
    basis.variance_fractions.assign(d, 0.0);
    if (total > 0.0) {
        for (size_t i = 0; i < d; ++i) basis.variance_fractions[i] = basis.eigenvalues[i] / total;
    }
    basis.finalize();
    return basis;
}

Tensor to_pc(const Tensor& x, const PcaBasis& basis) {
    if (x.rank() == 0 || x.shape().back() != basis.dim) {
        throw ShapeError("to_pc: trailing extent of " + shape_str(x.shape()) +
                         " does not match basis dimension " + std::to_string(basis.dim));
    }
    return linear(sub(x, basis.mean_tensor()), basis.v_tensor(), Tensor());
}

Tensor from_pc(const Tensor& x_pc, const PcaBasis& basis) {
    if (x_pc.rank() == 0 || x_pc.shape().back() != basis.dim) {
        throw ShapeError("from_pc: trailing extent of " + shape_str(x_pc.shape()) +
                         " does not match basis dimension " + std::to_string(basis.dim));
    }
    return add(linear(x_pc, basis.vt_tensor(), Tensor()), basis.mean_tensor());
}

Tensor masked_reconstruction(const Tensor& x, const ComponentMask& mask,
                             const PcaBasis& basis) {
    if (mask.dim() != basis.dim) {
        throw ShapeError("masked_reconstruction: mask length " + std::to_string(mask.dim()) +
                         " does not match basis dimension " + std::to_string(basis.dim));
    }
    return from_pc(mul(to_pc(x, basis), component_mask_to_indicator(mask)), basis);
}

void save_basis(const std::string& path, const PcaBasis& basis) {
    BinWriter w(path);
    w.magic("PCAB");
    w.u32(1);
    w.u64(basis.dim);
    for (double v : basis.mean) w.f64(v);
    for (double v : basis.eigenvalues) w.f64(v);
    for (double v : basis.components) w.f64(v);
    w.close();
}

PcaBasis load_basis(const std::string& path) {
    BinReader r(path);
    r.expect_magic("PCAB");
    const uint32_t version = r.u32();
    if (version != 1) {
        throw IoError("unsupported basis version " + std::to_string(version) + " in " + path);
    }
    PcaBasis basis;
    basis.dim = r.u64();
    basis.mean.resize(basis.dim);
    basis.eigenvalues.resize(basis.dim);
    basis.components.resize(basis.dim * basis.dim);
    for (double& v : basis.mean) v = r.f64();
    for (double& v : basis.eigenvalues) v = r.f64();
    for (double& v : basis.components) v = r.f64();
    if (!r.at_eof()) throw IoError("trailing bytes in basis file: " + path);
    const double total = kahan_sum(basis.eigenvalues);
    basis.variance_fractions.assign(basis.dim, 0.0);
    if (total > 0.0) {
        for (size_t i = 0; i < basis.dim; ++i) {
            basis.variance_fractions[i] = basis.eigenvalues[i] / total;
        }
    }
    basis.finalize();
    return basis;
}

} // namespace pmae
