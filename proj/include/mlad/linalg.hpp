#pragma once

#include "mlad/mat.hpp"

namespace mlad {

struct SymEig {
  Mat eigvecs;  // columns are eigenvectors
  Vec eigvals;  // descending
  int sweeps = 0;
};

struct JacobiOptions {
  // Stop once the off-diagonal Frobenius norm falls below
  // tolerance * max(1, ||A||_F).
  double tolerance = 1e-12;
  int max_sweeps = 100;
  double symmetry_tolerance = 1e-10;
};

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Eigenvalues come
// back in descending order and each eigenvector's largest-magnitude entry is
// nonnegative.
SymEig sym_eig(const Mat& a, const JacobiOptions& opt = {});

// U diag(values) U^T
Mat reconstruct(const SymEig& e);

}  // namespace mlad
