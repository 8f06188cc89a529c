// Copyright 2026 The da_detect Authors
// SPDX-License-Identifier: Apache-2.0

#include "dadet/params.hpp"

namespace dadet {

ParamGroup param_group(const std::string& name) {
  const std::string head = name.substr(0, name.find('.'));
  if (head == "backbone") return ParamGroup::kBackbone;
  if (head == "rpn") return ParamGroup::kRpn;
  if (head == "roi") return ParamGroup::kRoiHead;
  if (head == "img_head") return ParamGroup::kImageHead;
  if (head == "inst_head") return ParamGroup::kInstanceHead;
  if (head == "centers") return ParamGroup::kCenters;
  throw std::invalid_argument("parameter " + name + " belongs to no known group");
}

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBackbone: return "backbone";
    case ParamGroup::kRpn: return "rpn";
    case ParamGroup::kRoiHead: return "roi";
    case ParamGroup::kImageHead: return "img_head";
    case ParamGroup::kInstanceHead: return "inst_head";
    case ParamGroup::kCenters: return "centers";
  }
  return "?";
}

}  // namespace dadet
