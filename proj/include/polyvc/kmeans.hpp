#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "polyvc/features.hpp"
#include "polyvc/matrix.hpp"
#include "polyvc/rng.hpp"

namespace polyvc {

struct KMeansCodebook {
  MatF centroids;  // K x dim
  int k = 0;
  int dim = 0;
};

struct KMeansOptions {
  int k = 2;
  int max_iters = 100;
  int restarts = 8;
  uint64_t seed = 0;
  double tol = 1e-8;  // relative WCSS improvement stopping threshold
};

namespace detail {

inline double sqdist(const float* a, const float* b, size_t dim) {
  double acc = 0.0;
  for (size_t i = 0; i < dim; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

/// Nearest centroid by squared distance, ties to the lowest index.
inline size_t nearest_centroid(const float* x, const MatF& centroids, size_t dim) {
  size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t c = 0; c < centroids.rows(); ++c) {
    const double d = sqdist(x, centroids.row(c), dim);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

/// Greedy farthest-point seeding: first center picked by the rng, every next
/// center is the point farthest from its nearest chosen center.
inline MatF seed_centroids(const MatF& points, int k, Rng& rng) {
  const size_t n = points.rows(), dim = points.cols();
  MatF centroids(static_cast<size_t>(k), dim);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());

  size_t first = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(n) - 1));
  std::copy_n(points.row(first), dim, centroids.row(0));
  for (int c = 1; c < k; ++c) {
    size_t far = 0;
    double far_d = -1.0;
    for (size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], sqdist(points.row(i), centroids.row(static_cast<size_t>(c - 1)), dim));
      if (dist[i] > far_d) {
        far_d = dist[i];
        far = i;
      }
    }
    std::copy_n(points.row(far), dim, centroids.row(static_cast<size_t>(c)));
  }
  return centroids;
}

inline double lloyd_run(const MatF& points, MatF& centroids, int max_iters, double tol,
                        std::vector<size_t>& assign, std::vector<double>* wcss_history) {
  const size_t n = points.rows(), dim = points.cols(), k = centroids.rows();
  std::vector<double> sums(k * dim);
  std::vector<size_t> counts(k);
  double prev_wcss = std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < max_iters; ++iter) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    double wcss = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const size_t c = nearest_centroid(points.row(i), centroids, dim);
      assign[i] = c;
      wcss += sqdist(points.row(i), centroids.row(c), dim);
      counts[c]++;
      for (size_t d = 0; d < dim; ++d) sums[c * dim + d] += points(i, d);
    }
    if (wcss_history) wcss_history->push_back(wcss);

    for (size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (size_t d = 0; d < dim; ++d)
          centroids(c, d) = static_cast<float>(sums[c * dim + d] / static_cast<double>(counts[c]));
      } else {
        // empty cluster: grab the point farthest from its assigned centroid
        size_t far = 0;
        double far_d = -1.0;
        for (size_t i = 0; i < n; ++i) {
          const double d = sqdist(points.row(i), centroids.row(assign[i]), dim);
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        std::copy_n(points.row(far), dim, centroids.row(c));
      }
    }
    if (std::isfinite(prev_wcss) && prev_wcss - wcss <= tol * std::max(1.0, prev_wcss)) return wcss;
    prev_wcss = wcss;
  }
  return prev_wcss;
}

}  // namespace detail

/// Lloyd's algorithm with greedy farthest-point seeding and deterministic
/// restarts. The best run by final WCSS wins; its per-iteration WCSS trace
/// lands in wcss_history when provided.
inline KMeansCodebook kmeans_fit(const MatF& points, const KMeansOptions& opt,
                                 std::vector<double>* wcss_history = nullptr) {
  if (opt.k < 1) throw ConfigError("kmeans: k must be >= 1");
  if (points.rows() < static_cast<size_t>(opt.k))
    throw InsufficientDataError("kmeans: fewer points than clusters");
  if (!points.all_finite()) throw ContractViolation("kmeans: non-finite input");

  MatF best;
  double best_wcss = std::numeric_limits<double>::infinity();
  std::vector<double> best_history;
  std::vector<size_t> assign(points.rows());

  for (int r = 0; r < std::max(1, opt.restarts); ++r) {
    Rng rng(derive_seed(opt.seed, 0x6b, static_cast<uint64_t>(r)));
    MatF centroids = detail::seed_centroids(points, opt.k, rng);
    std::vector<double> history;
    const double wcss = detail::lloyd_run(points, centroids, opt.max_iters, opt.tol, assign, &history);
    if (wcss < best_wcss) {
      best_wcss = wcss;
      best = std::move(centroids);
      best_history = std::move(history);
    }
  }
  if (wcss_history) *wcss_history = best_history;

  KMeansCodebook cb;
  cb.centroids = std::move(best);
  cb.k = opt.k;
  cb.dim = static_cast<int>(points.cols());
  return cb;
}

/// Maps every row to its nearest centroid (ties to the lowest index).
inline std::vector<int> kmeans_assign(const MatF& points, const KMeansCodebook& cb) {
  if (static_cast<int>(points.cols()) != cb.dim) throw ContractViolation("kmeans assign: dim mismatch");
  std::vector<int> out(points.rows());
  for (size_t i = 0; i < points.rows(); ++i)
    out[i] = static_cast<int>(detail::nearest_centroid(points.row(i), cb.centroids, points.cols()));
  return out;
}

/// Replaces every feature vector with its nearest centroid. Idempotent:
/// discretizing a discretized matrix is a no-op.
inline SSLFeatureMatrix discretize_features(const SSLFeatureMatrix& f, const KMeansCodebook& cb) {
  const std::vector<int> labels = kmeans_assign(f.vectors, cb);
  SSLFeatureMatrix out = f;
  for (size_t t = 0; t < f.vectors.rows(); ++t)
    std::copy_n(cb.centroids.row(static_cast<size_t>(labels[t])), f.vectors.cols(), out.vectors.row(t));
  return out;
}

inline void save_codebook(const std::filesystem::path& path, const KMeansCodebook& cb) {
  MatrixContainer c;
  c.data = cb.centroids;
  c.dim = static_cast<uint32_t>(cb.dim);
  c.frames = static_cast<uint32_t>(cb.k);  // frame slot doubles as K for codebooks
  c.hop = 0;
  c.rate = 0;
  write_container_file(path, serialize_matrix_container(c));
}

inline KMeansCodebook load_codebook(const std::filesystem::path& path) {
  MatrixContainer c = parse_matrix_container(read_file_bytes(path));
  KMeansCodebook cb;
  cb.centroids = std::move(c.data);
  cb.k = static_cast<int>(c.frames);
  cb.dim = static_cast<int>(c.dim);
  return cb;
}

}  // namespace polyvc
