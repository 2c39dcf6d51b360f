#pragma once
// Grid masking augmentation: a regular grid of square patches laid over an
// image, masked variants whose patch carries the image's own mean brightness,
// and <anchor, positives, negatives> triplet assembly from those variants.

#include <cstddef>
#include <string>
#include <vector>

#include "core/error.hpp"
#include "core/tensor.hpp"

namespace ssgan {

/// Which grid cells supply the negative (non-corner) masked variants.
enum class NegativeMode {
  all_non_corner,  // every cell that is not one of the 4 corners
  center_only,     // only the inner (grid_n - 2)^2 cells
};

struct Cell {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Cell& a, const Cell& b) {
    return a.row == b.row && a.col == b.col;
  }
};

/// A regular grid_n x grid_n partition of an image into square patches.
/// positions is row-major; corner_cells is ordered top-left, top-right,
/// bottom-left, bottom-right; negative_cells is row-major per NegativeMode.
struct MaskGrid {
  std::size_t image_size = 0;
  std::size_t patch_size = 0;
  std::size_t grid_n = 0;
  std::vector<Cell> positions;
  std::vector<Cell> corner_cells;
  std::vector<Cell> negative_cells;
};

inline MaskGrid make_grid(std::size_t image_size, std::size_t patch_size, NegativeMode mode) {
  require(patch_size >= 1, ErrCode::invalid_argument, "make_grid: patch size must be >= 1");
  require(image_size % patch_size == 0, ErrCode::invalid_argument,
          "make_grid: image size " + std::to_string(image_size) + " not divisible by patch " +
              std::to_string(patch_size));
  const std::size_t n = image_size / patch_size;
  require(n >= 2, ErrCode::invalid_argument,
          "make_grid: grid must be at least 2x2, got " + std::to_string(n));

  MaskGrid grid;
  grid.image_size = image_size;
  grid.patch_size = patch_size;
  grid.grid_n = n;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) grid.positions.push_back({r, c});
  grid.corner_cells = {{0, 0}, {0, n - 1}, {n - 1, 0}, {n - 1, n - 1}};

  auto is_corner = [n](Cell cell) {
    return (cell.row == 0 || cell.row == n - 1) && (cell.col == 0 || cell.col == n - 1);
  };
  if (mode == NegativeMode::all_non_corner) {
    for (Cell cell : grid.positions)
      if (!is_corner(cell)) grid.negative_cells.push_back(cell);
  } else {
    for (std::size_t r = 1; r + 1 < n; ++r)
      for (std::size_t c = 1; c + 1 < n; ++c) grid.negative_cells.push_back({r, c});
  }
  return grid;
}

/// Per-channel means of a [C, H, W] image, accumulated in double so the
/// result does not depend on summation tricks of the scalar type.
template <typename S>
std::vector<S> channel_means(const Tensor<S>& x) {
  require(x.rank() == 3, ErrCode::shape_mismatch, "channel_means: expected a [C, H, W] image");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<S> means(c);
  for (std::size_t i = 0; i < c; ++i) {
    double acc = 0;
    const S* p = x.data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) acc += p[j];
    means[i] = static_cast<S>(acc / static_cast<double>(hw));
  }
  return means;
}

/// Copy of x with the patch rectangle of `cell` overwritten by fill[channel].
/// Pixels outside the rectangle are bit-identical to x, so masking with a
/// precomputed fill is idempotent.
template <typename S>
Tensor<S> mask_image_with(const Tensor<S>& x, Cell cell, const MaskGrid& grid,
                          const std::vector<S>& fill) {
  require(x.rank() == 3 && x.dim(1) == grid.image_size && x.dim(2) == grid.image_size,
          ErrCode::shape_mismatch, "mask_image: image does not match the grid extent");
  require(cell.row < grid.grid_n && cell.col < grid.grid_n, ErrCode::invalid_argument,
          "mask_image: cell (" + std::to_string(cell.row) + ", " + std::to_string(cell.col) +
              ") outside a " + std::to_string(grid.grid_n) + "x" + std::to_string(grid.grid_n) +
              " grid");
  require(fill.size() == x.dim(0), ErrCode::shape_mismatch,
          "mask_image: one fill value per channel required");

  Tensor<S> out = x.clone();
  const std::size_t h = grid.image_size, p = grid.patch_size;
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    S* plane = out.data() + c * h * h;
    for (std::size_t r = cell.row * p; r < (cell.row + 1) * p; ++r)
      for (std::size_t col = cell.col * p; col < (cell.col + 1) * p; ++col)
        plane[r * h + col] = fill[c];
  }
  return out;
}

/// Masks one grid cell with the mean brightness of the original image:
/// per-channel means by default, or one global mean shared by all channels.
template <typename S>
Tensor<S> mask_image(const Tensor<S>& x, Cell cell, const MaskGrid& grid,
                     bool global_mean = false) {
  std::vector<S> fill = channel_means(x);
  if (global_mean) {
    double acc = 0;
    for (S m : fill) acc += m;
    const S g = static_cast<S>(acc / static_cast<double>(fill.size()));
    fill.assign(fill.size(), g);
  }
  return mask_image_with(x, cell, grid, fill);
}

/// An anchor image with its corner-masked positives and the negative-cell
/// masked variants. The anchor shares the input's storage and is never
/// written to.
template <typename S>
struct TripletImages {
  Tensor<S> anchor;
  std::vector<Tensor<S>> positives;
  std::vector<Tensor<S>> negatives;
};

/// Builds all masked variants for one anchor. The fill brightness is computed
/// once from the unmasked anchor and reused for every variant.
template <typename S>
TripletImages<S> build_triplets(const Tensor<S>& x, const MaskGrid& grid,
                                bool global_mean = false) {
  require(x.rank() == 3 && x.dim(1) == grid.image_size && x.dim(2) == grid.image_size,
          ErrCode::shape_mismatch, "build_triplets: image does not match the grid extent");
  std::vector<S> fill = channel_means(x);
  if (global_mean) {
    double acc = 0;
    for (S m : fill) acc += m;
    const S g = static_cast<S>(acc / static_cast<double>(fill.size()));
    fill.assign(fill.size(), g);
  }
  TripletImages<S> out;
  out.anchor = x;
  for (Cell cell : grid.corner_cells) out.positives.push_back(mask_image_with(x, cell, grid, fill));
  for (Cell cell : grid.negative_cells)
    out.negatives.push_back(mask_image_with(x, cell, grid, fill));
  return out;
}

}  // namespace ssgan
