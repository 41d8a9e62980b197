#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "capsct/data/scan.hpp"

namespace capsct::data {

inline constexpr std::size_t kDefaultImageSize = 64;

/// Draws a synthetic chest volume. Deterministic in (cls, profile, seed, size).
VolumetricScan generate_scan(ClassLabel cls, const ShiftProfile& profile, std::uint64_t seed,
                             std::size_t image_size = kDefaultImageSize);

/// Binary lung mask of one slice of a generated scan, rendered at height x width.
std::vector<std::uint8_t> synthetic_lung_mask(const ScanMetadata& meta, std::size_t n_slices, std::size_t slice,
                                              std::size_t height, std::size_t width);

// Scans per class, in (COVID-19, CAP, Normal) order, for each set.
struct CorpusSpec {
  std::map<SetId, std::array<std::size_t, 3>> counts;
  // Overrides of the named presets; a mixture profile still draws from the
  // TEST1/TEST2 presets.
  std::map<SetId, ShiftProfile> profiles;

  static CorpusSpec desk_default();
  std::size_t total() const;
};

std::vector<VolumetricScan> generate_corpus(const CorpusSpec& spec, std::uint64_t base_seed,
                                            std::size_t image_size = kDefaultImageSize);

class MaskProvider {
 public:
  virtual ~MaskProvider() = default;
  /// One byte per pixel of the given slice, nonzero inside the lungs.
  virtual std::vector<std::uint8_t> mask(const VolumetricScan& scan, std::size_t slice) const = 0;
};

// Stands in for the segmentation network: re-renders the generator's lung
// ellipses from the scan metadata.
class SyntheticMaskProvider : public MaskProvider {
 public:
  std::vector<std::uint8_t> mask(const VolumetricScan& scan, std::size_t slice) const override;
};

// Passes every pixel; used for data that has already been masked.
class FullMaskProvider : public MaskProvider {
 public:
  std::vector<std::uint8_t> mask(const VolumetricScan& scan, std::size_t slice) const override;
};

/// Masks, resizes (bilinear) to input_size x input_size and min-max
/// normalizes every slice. Out-of-mask pixels stay 0; the range is taken
/// over the in-mask pixels.
VolumetricScan preprocess(const VolumetricScan& scan, const MaskProvider& masks, std::size_t input_size);

/// Half-pixel-centred bilinear resize of one [h, w] image.
std::vector<float> resize_bilinear(std::span<const float> image, std::size_t h, std::size_t w, std::size_t out_h,
                                   std::size_t out_w);

/// Patient-level split stratified by class. Returns (train, validation).
std::pair<std::vector<VolumetricScan>, std::vector<VolumetricScan>> split_train_validation(
    const std::vector<VolumetricScan>& corpus, double fraction, std::uint64_t seed);

}  // namespace capsct::data
