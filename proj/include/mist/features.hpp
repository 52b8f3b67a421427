#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mist/tensor.hpp"

namespace mist {

/// Patch features of a video split into K segments of T frames of N patches,
/// stored as a K×T×N×D tensor. When a CLS flag is set, index 0 of that axis
/// is the CLS slot.
struct VideoFeatures {
  Tensor x;
  bool has_cls_patch = false;
  bool has_cls_frame = false;
  /// Set by add_positions; a second application is refused.
  bool positions_added = false;

  std::size_t segments() const { return x.extent(0); }
  std::size_t frames_per_segment() const { return x.extent(1); }
  std::size_t patches() const { return x.extent(2); }
  std::size_t dim() const { return x.extent(3); }
};

/// Word features, M×D; row 0 is the question CLS token.
struct QuestionFeatures {
  Tensor w;
};

struct AnswerBank {
  Tensor a;
  std::vector<std::string> labels;
};

/// Learnable temporal table φ_t with K·T+1 rows and token-type table φ_h
/// with 3 rows (segment, region, word).
struct PositionTable {
  Tensor temporal;
  Tensor type;
};

enum class PoolMode { mean, first_token };

struct PooledVideo {
  Tensor frames;    // K×T×D
  Tensor segments;  // K×D
};

PooledVideo pool_hierarchy(const VideoFeatures& v, PoolMode mode);
Tensor pool_question(const QuestionFeatures& q, PoolMode mode);

/// Row of the temporal table used by frame t of segment k.
inline std::size_t position_row(std::size_t segment, std::size_t frame, std::size_t frames_per_segment) {
  return segment * frames_per_segment + frame + 1;
}

VideoFeatures add_positions(const VideoFeatures& v, const PositionTable& table);

void validate(const VideoFeatures& v);
void validate(const QuestionFeatures& q, std::size_t dim);
void validate(const AnswerBank& a, std::size_t dim);

// ---------------------------------------------------------------------------
// Feature files: "MISTFEAT", u32 LE header length, JSON header, then f32 LE
// payloads for video, question and answers in that order.

struct FeatureBundle {
  VideoFeatures video;
  QuestionFeatures question;
  AnswerBank answers;
};

void save_features(const VideoFeatures& v, const QuestionFeatures& q, const AnswerBank& a,
                   const std::filesystem::path& path);
FeatureBundle load_features(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic planted-event tasks.

enum class TaskKind { single_event, multi_event_order };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct SynthConfig {
  std::size_t K = 8, T = 4, N = 16, D = 32, M = 8, A = 4;
  TaskKind task = TaskKind::single_event;
  double noise_std = 0.1;
  /// Patch positions an event occupies in every frame of its segment.
  std::size_t event_patches = 2;
  /// Weaker patches of another class sharing the event's frames.
  std::size_t clutter_patches = 6;
  double clutter_scale = 0.5;
  /// Seeds the class prototypes, which are shared by every sample of a task.
  std::uint64_t task_seed = 0;
};

void validate(const SynthConfig& cfg);

struct PlantedEvent {
  std::size_t segment = 0;
  std::size_t class_id = 0;
  std::vector<std::size_t> patches;
  double scale = 1.0;
};

struct PlantedInfo {
  TaskKind kind = TaskKind::single_event;
  std::vector<PlantedEvent> events;   // temporal order
  std::vector<PlantedEvent> clutter;
  std::optional<std::size_t> cue_class;
  /// Segment holding the event the answer refers to.
  std::size_t answer_segment = 0;
};

struct SynthSample {
  VideoFeatures video;
  QuestionFeatures question;
  AnswerBank answers;
  std::size_t label = 0;
  PlantedInfo planted;
};

/// A×D orthonormal prototypes (signed, permuted basis vectors) for a task.
Tensor class_prototypes(const SynthConfig& cfg);

SynthSample generate_synthetic(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace mist
