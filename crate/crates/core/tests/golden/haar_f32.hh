DGFM               W5?����$? ?�+��U߃?��C���>vX7�