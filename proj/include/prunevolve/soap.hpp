#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "prunevolve/expr.hpp"

namespace prunevolve {

// A scoring function shipped with the engine. The `soap` family holds the
// classic hand-crafted channel/feature metrics used to seed evolution; the
// `evolved` family holds reference functions produced by the engine.
struct NamedFunction {
  enum class Family { soap, evolved };
  std::string name;
  Family family;
  ExprTree tree;
};

const std::vector<NamedFunction>& soap_functions();      // the 10 seeds
const std::vector<NamedFunction>& evolved_functions();   // the 5 references
const std::vector<NamedFunction>& function_library();    // all 15

const NamedFunction* find_function(std::string_view name);

}  // namespace prunevolve
