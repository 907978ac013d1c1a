#pragma once

#include <string>
#include <vector>

#include "pmae/masking.hpp"
#include "pmae/tensor.hpp"

namespace pmae {

struct EigResult {
    std::vector<double> values;  // descending
    std::vector<double> vectors; // n x n row-major; column i pairs with values[i]
};

// Eigendecomposition of a symmetric matrix via Householder tridiagonalization
// followed by implicit-shift QL. Eigenvalues come back descending; each
// eigenvector's largest-magnitude entry is made positive (ties: the first
// such entry), so results are reproducible.
EigResult symmetric_eig(const std::vector<double>& s, size_t n);

// Orthonormal basis of pixel space fitted to a dataset: mean, eigenvectors of
// the mean-centered scatter matrix X^T X (unnormalized), eigenvalues, and the
// per-component fraction of total variance.
struct PcaBasis {
    size_t dim = 0;
    std::vector<double> mean;               // D
    std::vector<double> eigenvalues;        // D, descending, clamped >= 0
    std::vector<double> components;         // D x D row-major; columns are eigenvectors
    std::vector<double> variance_fractions; // eigenvalues / sum

    // Prebuilt tensors for the transform ops; filled by fit/load, immutable after.
    const Tensor& mean_tensor() const { return mean_t_; }
    const Tensor& v_tensor() const { return v_t_; }
    const Tensor& vt_tensor() const { return vt_t_; }

    void finalize(); // builds the cached tensors from the plain fields

private:
    Tensor mean_t_, v_t_, vt_t_;
};

// Fits on X [N, D] (rows are flattened images). When D > 512 and N < D the
// N x N Gram matrix is decomposed instead and the eigenvectors are mapped
// back through X, with the null space filled by a deterministic Householder
// completion; eigenvalues below rank are exactly zero.
PcaBasis fit_pca(const Tensor& x);

// t(x): (x - mean) V. Accepts [D] or [.., D]; differentiable tape op.
Tensor to_pc(const Tensor& x, const PcaBasis& basis);
// t^{-1}(c): c V^T + mean.
Tensor from_pc(const Tensor& x_pc, const PcaBasis& basis);
// t^{-1}(visible ⊙ t(x)): zero the masked coefficients, project back.
Tensor masked_reconstruction(const Tensor& x, const ComponentMask& mask,
                             const PcaBasis& basis);

// Layout: magic "PCAB", version u32, D u64, then little-endian f64: mean (D),
// eigenvalues (D), components row-major (D*D). Bit-exact round-trip.
void save_basis(const std::string& path, const PcaBasis& basis);
PcaBasis load_basis(const std::string& path);

} // namespace pmae
