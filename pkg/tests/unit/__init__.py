# Unit tests - fast, one module each, small seeded problems
