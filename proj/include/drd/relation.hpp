#pragma once

// Spatial and channel relation maps over encoder features, and the squared
// error that aligns a student's maps with its teacher's.
//
// Feature maps are (C, H, W) or batched (B, C, H, W). Flattening the spatial
// axes gives F in R^{C x N}, N = H * W.
//   spatial:  S[i][j] = softmax_j(F_j . F_i)       over pixel columns, N x N
//   channel:  C[i][j] = softmax_j(F^j . F^i)       over channel rows,  C x C
// Every row of either map sums to one. Both maps are parameter free.

#include <cstdint>

#include <torch/torch.h>

namespace drd::relation {

struct RelationOptions {
  // Upper bound on the number of entries of one relation map. Spatial maps
  // on raw high-resolution features blow past this; pool first with
  // adapt_resolution. 4096^2 corresponds to a 64x64 feature grid.
  std::int64_t max_elements = 4096LL * 4096LL;
};

// Validates a (C,H,W) or (B,C,H,W) feature tensor: rank, non-empty axes and
// finite entries. Throws ShapeError / ValueError.
void check_feature_map(const torch::Tensor& features);

// Row-wise softmax along the last axis with the row maximum subtracted
// before exponentiation.
torch::Tensor stable_row_softmax(const torch::Tensor& affinity);

// (C,H,W) -> (N,N); (B,C,H,W) -> (B,N,N).
torch::Tensor spatial_relation(const torch::Tensor& features, const RelationOptions& options = {});

// (C,H,W) -> (C,C); (B,C,H,W) -> (B,C,C).
torch::Tensor channel_relation(const torch::Tensor& features, const RelationOptions& options = {});

// Mean of squared differences over all N*N (or C*C) entries, and over the
// batch when maps are batched. Differentiable in the student map.
torch::Tensor spatial_relation_loss(const torch::Tensor& teacher, const torch::Tensor& student);
torch::Tensor channel_relation_loss(const torch::Tensor& teacher, const torch::Tensor& student);

// Average-pools features to (target_h, target_w). Requires
// 0 < target_h <= H and 0 < target_w <= W; the identity when equal.
torch::Tensor adapt_resolution(const torch::Tensor& features, std::int64_t target_h, std::int64_t target_w);

}  // namespace drd::relation
