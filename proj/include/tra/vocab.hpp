#pragma once

#include "tra/core.hpp"
#include "tra/trajectory.hpp"

#include <array>
#include <string>
#include <string_view>

namespace tra {

// Fixed symbolic vocabulary shared by every environment. Ids are stable and
// part of the dataset format.
namespace tok {
enum : int {
  MOVE, PUT, PLACE, GO, ENTER, OPEN, TO, IN, INTO, THE, THEN, AND,
  FOOD, TOY, TOOL,
  OBJ0, OBJ1, OBJ2, OBJ3, OBJ4, OBJ5, OBJ6, OBJ7,
  CTR0, CTR1, CTR2, CTR3,
  ROOM0, ROOM1, ROOM2, ROOM3, ROOM4, ROOM5, ROOM6, ROOM7,
  ROOM8, ROOM9, ROOM10, ROOM11, ROOM12, ROOM13, ROOM14, ROOM15,
  kCount
};
}  // namespace tok

inline constexpr int kVocabSize = 64;
inline constexpr int kMaxInstructionLength = 8;
inline constexpr int kMaxObjects = 8;
inline constexpr int kMaxContainers = 4;
inline constexpr int kMaxRooms = 16;
static_assert(tok::kCount <= kVocabSize);

inline constexpr std::array<std::string_view, tok::kCount> kTokenNames = {
    "MOVE", "PUT", "PLACE", "GO", "ENTER", "OPEN", "TO", "IN", "INTO", "THE", "THEN", "AND",
    "FOOD", "TOY", "TOOL",
    "OBJ0", "OBJ1", "OBJ2", "OBJ3", "OBJ4", "OBJ5", "OBJ6", "OBJ7",
    "CTR0", "CTR1", "CTR2", "CTR3",
    "ROOM0", "ROOM1", "ROOM2", "ROOM3", "ROOM4", "ROOM5", "ROOM6", "ROOM7",
    "ROOM8", "ROOM9", "ROOM10", "ROOM11", "ROOM12", "ROOM13", "ROOM14", "ROOM15"};

inline int obj_token(int i) { return tok::OBJ0 + i; }
inline int ctr_token(int j) { return tok::CTR0 + j; }
inline int room_token(int r) { return tok::ROOM0 + r; }

inline std::string to_text(const Instruction& ell) {
  std::string out;
  for (int t : ell) {
    if (!out.empty()) out += ' ';
    out += (t >= 0 && t < tok::kCount) ? std::string(kTokenNames[t]) : "<" + std::to_string(t) + ">";
  }
  return out;
}

inline void validate_instruction(const Instruction& ell) {
  require(!ell.empty(), ErrorKind::InvalidArgument, "empty instruction");
  require(static_cast<int>(ell.size()) <= kMaxInstructionLength, ErrorKind::InvalidArgument,
          "instruction longer than " + std::to_string(kMaxInstructionLength) + " tokens");
  for (int t : ell)
    if (t < 0 || t >= kVocabSize) throw Error(ErrorKind::InvalidArgument, "token out of vocabulary: " + std::to_string(t));
}

}  // namespace tra
