#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace fairalign {

// Instruction sent to a teacher to inject demographics into a neutral query:
//
//   Rewrite the following medical question so that it states the patient's
//   race and gender. ...
//   Race: <race>
//   Gender: <gender>
//   Question: <neutral text>

struct RewriteInstruction {
  std::string race;
  std::string gender;
  std::string question;
};

std::string rewrite_instruction(const RewriteInstruction& instruction);
std::optional<RewriteInstruction> parse_rewrite_instruction(std::string_view prompt);

}  // namespace fairalign
